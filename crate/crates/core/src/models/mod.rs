//! Toy differentiable networks: the frozen backbone, the per-cell detection
//! head used for both the general and the adaptive decoder, and the
//! single-layer LSTM that gates key-frame selection.

mod backbone;
mod decoder;
pub(crate) mod lstm;
mod store;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use backbone::{backbone_forward, Backbone};
pub use decoder::{decoder_forward, decoder_grad, sgd_step, DecoderGrad, DecoderParams, OracleHead};
pub use lstm::{lstm_forward, lstm_train_step, LstmGrad, LstmParams, LstmState};
pub use store::ParamStore;

/// An `s x s` grid of `d`-dimensional feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureFrame {
    pub frame_id: u64,
    s: usize,
    d: usize,
    values: Vec<f64>,
}

impl FeatureFrame {
    pub fn new(frame_id: u64, s: usize, d: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != s * s * d {
            return Err(Error::ShapeMismatch {
                expected: format!("{s}x{s}x{d} features"),
                found: format!("{} values", values.len()),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature value at flat index {i}")));
        }
        Ok(Self { frame_id, s, d, values })
    }

    pub fn zeros(frame_id: u64, s: usize, d: usize) -> Self {
        Self {
            frame_id,
            s,
            d,
            values: vec![0.0; s * s * d],
        }
    }

    #[inline]
    pub fn s(&self) -> usize {
        self.s
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn cell(&self, index: usize) -> &[f64] {
        &self.values[index * self.d..(index + 1) * self.d]
    }

    #[inline]
    pub fn cell_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.values[index * self.d..(index + 1) * self.d]
    }

    pub fn cells(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.d)
    }

    /// Mean absolute elementwise difference, used by scene-change detection.
    pub fn mean_abs_diff(&self, other: &FeatureFrame) -> Result<f64> {
        if self.s != other.s || self.d != other.d {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}x{}", self.s, self.s, self.d),
                found: format!("{}x{}x{}", other.s, other.s, other.d),
            });
        }
        let sum: f64 = self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).sum();
        Ok(sum / self.values.len() as f64)
    }
}

/// Global pooled statistics of a feature frame: per-channel means followed
/// by per-channel maxima.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSummary(pub Vec<f64>);

impl FeatureSummary {
    pub fn of(frame: &FeatureFrame) -> Self {
        let d = frame.d();
        let mut mean = vec![0.0; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for cell in frame.cells() {
            for (k, &v) in cell.iter().enumerate() {
                mean[k] += v;
                max[k] = max[k].max(v);
            }
        }
        let n = (frame.s() * frame.s()).max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean.extend(max);
        Self(mean)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}
