use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::FeatureSummary;
use crate::detection::sigmoid;
use crate::error::{Error, Result};

/// Hidden and cell state of the LSTM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

/// One LSTM cell followed by a scalar affine read-out and a sigmoid.
///
/// Gate rows are stacked `[input, forget, candidate, output]`, each `hidden`
/// rows tall. `w_x` is `4h x input`, `w_h` is `4h x h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub input: usize,
    pub hidden: usize,
    pub w_x: Vec<f64>,
    pub w_h: Vec<f64>,
    pub b: Vec<f64>,
    pub w_out: Vec<f64>,
    pub b_out: f64,
    pub state: LstmState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmGrad {
    pub w_x: Vec<f64>,
    pub w_h: Vec<f64>,
    pub b: Vec<f64>,
    pub w_out: Vec<f64>,
    pub b_out: f64,
}

/// Intermediate values of a single step, kept for the backward pass.
struct StepCache {
    gates: Vec<f64>,
    c: Vec<f64>,
    h: Vec<f64>,
    score: f64,
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            input,
            hidden,
            w_x: vec![0.0; 4 * hidden * input],
            w_h: vec![0.0; 4 * hidden * hidden],
            b: vec![0.0; 4 * hidden],
            w_out: vec![0.0; hidden],
            b_out: 0.0,
            state: LstmState::zeros(hidden),
        }
    }

    /// Small random weights; the read-out bias starts at zero so the initial
    /// score sits near 0.5.
    pub fn random<R: Rng + ?Sized>(input: usize, hidden: usize, scale: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(input, hidden);
        let n = Normal::new(0.0, scale).unwrap();
        for w in p.w_x.iter_mut().chain(p.w_h.iter_mut()).chain(p.w_out.iter_mut()) {
            *w = n.sample(rng);
        }
        // forget gates open by default
        for j in hidden..2 * hidden {
            p.b[j] = 1.0;
        }
        p
    }

    pub fn reset_state(&mut self) {
        self.state = LstmState::zeros(self.hidden);
    }

    fn step(&self, from: &LstmState, x: &[f64]) -> StepCache {
        let (n, h) = (self.input, self.hidden);
        let mut gates = self.b.clone();
        for (r, g) in gates.iter_mut().enumerate() {
            let wx = &self.w_x[r * n..(r + 1) * n];
            let wh = &self.w_h[r * h..(r + 1) * h];
            *g += wx.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
                + wh.iter().zip(&from.h).map(|(w, v)| w * v).sum::<f64>();
        }
        for (r, g) in gates.iter_mut().enumerate() {
            *g = if (2 * h..3 * h).contains(&r) {
                g.tanh()
            } else {
                sigmoid(*g)
            };
        }
        let mut c = vec![0.0; h];
        let mut hid = vec![0.0; h];
        for j in 0..h {
            let (i, f, g, o) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
            c[j] = f * from.c[j] + i * g;
            hid[j] = o * c[j].tanh();
        }
        let z = self.w_out.iter().zip(&hid).map(|(w, v)| w * v).sum::<f64>() + self.b_out;
        StepCache {
            gates,
            c,
            h: hid,
            score: sigmoid(z),
        }
    }

    /// One-step truncated gradient of the binary cross-entropy between the
    /// score produced from `from` and `label`.
    pub fn bce_grad(&self, from: &LstmState, summary: &FeatureSummary, label: bool) -> LstmGrad {
        let (n, h) = (self.input, self.hidden);
        let x = &summary.0;
        let cache = self.step(from, x);
        let y = if label { 1.0 } else { 0.0 };
        let dz = cache.score - y;
        let mut g = LstmGrad {
            w_x: vec![0.0; self.w_x.len()],
            w_h: vec![0.0; self.w_h.len()],
            b: vec![0.0; self.b.len()],
            w_out: cache.h.iter().map(|v| dz * v).collect(),
            b_out: dz,
        };
        for j in 0..h {
            let (i, f, gg, o) = (
                cache.gates[j],
                cache.gates[h + j],
                cache.gates[2 * h + j],
                cache.gates[3 * h + j],
            );
            let dh = dz * self.w_out[j];
            let tc = cache.c[j].tanh();
            let d_o = dh * tc;
            let dc = dh * o * (1.0 - tc * tc);
            let pre = [
                (j, dc * gg * i * (1.0 - i)),
                (h + j, dc * from.c[j] * f * (1.0 - f)),
                (2 * h + j, dc * i * (1.0 - gg * gg)),
                (3 * h + j, d_o * o * (1.0 - o)),
            ];
            for (r, dpre) in pre {
                g.b[r] = dpre;
                for k in 0..n {
                    g.w_x[r * n + k] = dpre * x[k];
                }
                for k in 0..h {
                    g.w_h[r * h + k] = dpre * from.h[k];
                }
            }
        }
        g
    }

    pub fn bce(&self, from: &LstmState, summary: &FeatureSummary, label: bool) -> f64 {
        let s = self.step(from, &summary.0).score.clamp(1e-15, 1.0 - 1e-15);
        if label {
            -s.ln()
        } else {
            -(1.0 - s).ln()
        }
    }

    pub fn is_finite(&self) -> bool {
        self.w_x
            .iter()
            .chain(&self.w_h)
            .chain(&self.b)
            .chain(&self.w_out)
            .chain(std::iter::once(&self.b_out))
            .all(|v| v.is_finite())
    }
}

/// Runs one LSTM step from the stored state. Returns the read-out score and
/// the state the step produced; the parameters are not modified.
pub fn lstm_forward(params: &LstmParams, summary: &FeatureSummary) -> Result<(f64, LstmState)> {
    if summary.len() != params.input {
        return Err(Error::ShapeMismatch {
            expected: format!("summary of length {}", params.input),
            found: format!("length {}", summary.len()),
        });
    }
    let cache = params.step(&params.state, &summary.0);
    Ok((cache.score, LstmState { h: cache.h, c: cache.c }))
}

/// One SGD step on the BCE of the score computed from the stored state.
/// The stored state itself is left unchanged.
pub fn lstm_train_step(params: &LstmParams, summary: &FeatureSummary, label: bool, lr: f64) -> Result<LstmParams> {
    train_from(params, &params.state, summary, label, lr)
}

/// As [`lstm_train_step`] but starting from an explicit previous state, e.g.
/// the one recorded when a decision was taken.
pub(crate) fn train_from(
    params: &LstmParams,
    from: &LstmState,
    summary: &FeatureSummary,
    label: bool,
    lr: f64,
) -> Result<LstmParams> {
    if summary.len() != params.input {
        return Err(Error::ShapeMismatch {
            expected: format!("summary of length {}", params.input),
            found: format!("length {}", summary.len()),
        });
    }
    let g = params.bce_grad(from, summary, label);
    let upd = |p: &[f64], g: &[f64]| -> Vec<f64> { p.iter().zip(g).map(|(p, g)| p - lr * g).collect() };
    let next = LstmParams {
        input: params.input,
        hidden: params.hidden,
        w_x: upd(&params.w_x, &g.w_x),
        w_h: upd(&params.w_h, &g.w_h),
        b: upd(&params.b, &g.b),
        w_out: upd(&params.w_out, &g.w_out),
        b_out: params.b_out - lr * g.b_out,
        state: params.state.clone(),
    };
    if !next.is_finite() {
        return Err(Error::NonFinite("lstm parameters after update".into()));
    }
    Ok(next)
}
