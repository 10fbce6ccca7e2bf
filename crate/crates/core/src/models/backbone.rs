use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{FeatureFrame, FeatureSummary};

/// Frozen per-cell feature transform `tanh(W x + b)` with weights drawn once
/// from the construction seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    d: usize,
    seed: u64,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Backbone {
    pub fn new(d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Normal::new(0.0, 1.0 / (d as f64).sqrt()).unwrap();
        let b = Normal::new(0.0, 0.05).unwrap();
        // identity-dominant so that the transform stays close to invertible
        let mut weights: Vec<f64> = (0..d * d).map(|_| 0.5 * w.sample(&mut rng)).collect();
        for i in 0..d {
            weights[i * d + i] += 1.0;
        }
        let bias = (0..d).map(|_| b.sample(&mut rng)).collect();
        Self { d, seed, weights, bias }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn forward(&self, frame: &FeatureFrame) -> (FeatureFrame, FeatureSummary) {
        backbone_forward(self, frame)
    }
}

/// Applies the frozen transform to every cell and pools a summary.
///
/// Panics if the frame's channel count differs from the backbone's; frames
/// are validated against the stream header before they reach the model.
pub fn backbone_forward(bb: &Backbone, frame: &FeatureFrame) -> (FeatureFrame, FeatureSummary) {
    assert_eq!(frame.d(), bb.d, "feature channels do not match backbone");
    let d = bb.d;
    let mut out = FeatureFrame::zeros(frame.frame_id, frame.s(), d);
    for (src, dst) in frame.cells().zip(out.values_mut().chunks_exact_mut(d)) {
        for (j, o) in dst.iter_mut().enumerate() {
            let row = &bb.weights[j * d..(j + 1) * d];
            let z: f64 = row.iter().zip(src).map(|(w, x)| w * x).sum::<f64>() + bb.bias[j];
            *o = z.tanh();
        }
    }
    let summary = FeatureSummary::of(&out);
    (out, summary)
}
