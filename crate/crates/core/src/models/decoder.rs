use std::time::Duration;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::FeatureFrame;
use crate::detection::{DetectionTensor, GridShape, BOX_CHANNELS};
use crate::error::{Error, Result};

/// Per-cell two-layer head: `d -> hidden -> 5 + c` with a tanh in between.
///
/// Weights are row-major: `w1[j * d + k]` maps input `k` to hidden unit `j`,
/// `w2[o * hidden + j]` maps hidden unit `j` to output channel `o`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    pub d: usize,
    pub hidden: usize,
    pub classes: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub version: u64,
}

/// Gradient with the same layout as [`DecoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderGrad {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl DecoderParams {
    pub fn zeros(d: usize, hidden: usize, classes: usize) -> Self {
        let out = BOX_CHANNELS + classes;
        Self {
            d,
            hidden,
            classes,
            w1: vec![0.0; hidden * d],
            b1: vec![0.0; hidden],
            w2: vec![0.0; out * hidden],
            b2: vec![0.0; out],
            version: 0,
        }
    }

    /// Xavier-style random initialization.
    pub fn random<R: Rng + ?Sized>(d: usize, hidden: usize, classes: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(d, hidden, classes);
        let n1 = Normal::new(0.0, (1.0 / d as f64).sqrt()).unwrap();
        let n2 = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).unwrap();
        p.w1.iter_mut().for_each(|w| *w = n1.sample(rng));
        p.w2.iter_mut().for_each(|w| *w = n2.sample(rng));
        p
    }

    #[inline]
    pub fn outputs(&self) -> usize {
        BOX_CHANNELS + self.classes
    }

    pub fn is_finite(&self) -> bool {
        [&self.w1, &self.b1, &self.w2, &self.b2]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn grid_shape(&self, s: usize) -> GridShape {
        GridShape { s, c: self.classes }
    }

    fn check_features(&self, features: &FeatureFrame) -> Result<()> {
        if features.d() != self.d {
            return Err(Error::config(
                "decoder.d",
                format!("head expects {} feature channels, frame has {}", self.d, features.d()),
            ));
        }
        Ok(())
    }

    /// Hidden activations of one cell.
    #[inline]
    fn hidden_into(&self, x: &[f64], act: &mut [f64]) {
        let d = self.d;
        for (j, a) in act.iter_mut().enumerate() {
            let row = &self.w1[j * d..(j + 1) * d];
            let z: f64 = row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + self.b1[j];
            *a = z.tanh();
        }
    }

    #[inline]
    fn output_into(&self, act: &[f64], out: &mut [f64]) {
        let h = self.hidden;
        for (o, y) in out.iter_mut().enumerate() {
            let row = &self.w2[o * h..(o + 1) * h];
            *y = row.iter().zip(act).map(|(w, a)| w * a).sum::<f64>() + self.b2[o];
        }
    }

    pub fn zero_grad(&self) -> DecoderGrad {
        DecoderGrad {
            w1: vec![0.0; self.w1.len()],
            b1: vec![0.0; self.b1.len()],
            w2: vec![0.0; self.w2.len()],
            b2: vec![0.0; self.b2.len()],
        }
    }
}

impl DecoderGrad {
    pub fn is_finite(&self) -> bool {
        [&self.w1, &self.b1, &self.w2, &self.b2]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2)
    }
}

/// Applies the head to every cell of `features`.
pub fn decoder_forward(params: &DecoderParams, features: &FeatureFrame) -> Result<DetectionTensor> {
    params.check_features(features)?;
    let shape = params.grid_shape(features.s());
    let mut t = DetectionTensor::zeros(shape);
    let mut act = vec![0.0; params.hidden];
    for (i, x) in features.cells().enumerate() {
        params.hidden_into(x, &mut act);
        params.output_into(&act, t.cell_mut(i));
    }
    Ok(t)
}

/// Gradient of `sum(output * loss_grad)` with respect to the head parameters.
pub fn decoder_grad(
    params: &DecoderParams,
    features: &FeatureFrame,
    loss_grad: &DetectionTensor,
) -> Result<DecoderGrad> {
    params.check_features(features)?;
    params.grid_shape(features.s()).check_same(&loss_grad.shape())?;
    let (d, h) = (params.d, params.hidden);
    let mut g = params.zero_grad();
    let mut act = vec![0.0; h];
    let mut dz = vec![0.0; h];
    for (i, x) in features.cells().enumerate() {
        let dy = loss_grad.cell(i);
        if dy.iter().all(|&v| v == 0.0) {
            continue;
        }
        params.hidden_into(x, &mut act);
        dz.iter_mut().for_each(|v| *v = 0.0);
        for (o, &gy) in dy.iter().enumerate() {
            if gy == 0.0 {
                continue;
            }
            g.b2[o] += gy;
            let grow = &mut g.w2[o * h..(o + 1) * h];
            let wrow = &params.w2[o * h..(o + 1) * h];
            for j in 0..h {
                grow[j] += gy * act[j];
                dz[j] += gy * wrow[j];
            }
        }
        for j in 0..h {
            let dzj = dz[j] * (1.0 - act[j] * act[j]);
            g.b1[j] += dzj;
            let grow = &mut g.w1[j * d..(j + 1) * d];
            for (gw, &xk) in grow.iter_mut().zip(x) {
                *gw += dzj * xk;
            }
        }
    }
    Ok(g)
}

/// `params - lr * grad` with the version bumped.
pub fn sgd_step(params: &DecoderParams, grad: &DecoderGrad, lr: f64) -> Result<DecoderParams> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::config("lr", format!("learning rate must be > 0, got {lr}")));
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite("decoder gradient".into()));
    }
    let step = |p: &[f64], g: &[f64]| -> Vec<f64> { p.iter().zip(g).map(|(p, g)| p - lr * g).collect() };
    let next = DecoderParams {
        d: params.d,
        hidden: params.hidden,
        classes: params.classes,
        w1: step(&params.w1, &grad.w1),
        b1: step(&params.b1, &grad.b1),
        w2: step(&params.w2, &grad.w2),
        b2: step(&params.b2, &grad.b2),
        version: params.version + 1,
    };
    if !next.is_finite() {
        return Err(Error::NonFinite("decoder parameters after update".into()));
    }
    Ok(next)
}

/// Heavier head with an artificial per-frame compute delay. Output-space
/// compatible with the student decoders.
#[derive(Debug, Clone)]
pub struct OracleHead {
    pub params: DecoderParams,
    pub delay: Duration,
}

impl OracleHead {
    pub fn forward(&self, features: &FeatureFrame) -> Result<DetectionTensor> {
        let t = decoder_forward(&self.params, features)?;
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_frame(rng: &mut ChaCha8Rng, s: usize, d: usize) -> FeatureFrame {
        let v = (0..s * s * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureFrame::new(0, s, d, v).unwrap()
    }

    #[test]
    fn zero_head_outputs_zero() {
        let p = DecoderParams::zeros(3, 4, 2);
        let f = FeatureFrame::new(0, 2, 3, vec![0.7; 12]).unwrap();
        let t = decoder_forward(&p, &f).unwrap();
        assert!(t.values().iter().all(|&v| v == 0.0));
        assert_eq!(t.shape(), GridShape { s: 2, c: 2 });
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let p = DecoderParams::zeros(3, 4, 2);
        let f = FeatureFrame::zeros(0, 2, 5);
        assert!(matches!(decoder_forward(&p, &f), Err(Error::Config { .. })));
    }

    #[test]
    fn single_cell_hand_computed() {
        // d = 2, hidden = 1, one class: out = 6 channels
        let mut p = DecoderParams::zeros(2, 1, 1);
        p.w1 = vec![0.5, -0.25];
        p.b1 = vec![0.1];
        p.w2 = vec![1.0, 2.0, 0.0, -1.0, 0.5, 3.0];
        p.b2 = vec![0.0, 0.0, 1.0, 0.0, 0.0, -1.0];
        let f = FeatureFrame::new(0, 1, 2, vec![2.0, 4.0]).unwrap();
        let a = (0.5 * 2.0 - 0.25 * 4.0 + 0.1f64).tanh();
        let t = decoder_forward(&p, &f).unwrap();
        let expect = [a, 2.0 * a, 1.0, -a, 0.5 * a, 3.0 * a - 1.0];
        for (v, e) in t.values().iter().zip(expect) {
            assert!((v - e).abs() < 1e-15);
        }
    }

    #[test]
    fn frozen_head_is_repeatable() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = DecoderParams::random(4, 6, 3, &mut rng);
        let f = random_frame(&mut rng, 3, 4);
        assert_eq!(decoder_forward(&p, &f).unwrap(), decoder_forward(&p, &f).unwrap());
    }

    fn contracted(p: &DecoderParams, f: &FeatureFrame, g: &DetectionTensor) -> f64 {
        decoder_forward(p, f)
            .unwrap()
            .values()
            .iter()
            .zip(g.values())
            .map(|(a, b)| a * b)
            .sum()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let p = DecoderParams::random(3, 4, 2, &mut rng);
            let f = random_frame(&mut rng, 2, 3);
            let shape = p.grid_shape(2);
            let lg =
                DetectionTensor::from_values(shape, (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .unwrap();
            let g = decoder_grad(&p, &f, &lg).unwrap();
            let eps = 1e-5;
            let fields: [(fn(&mut DecoderParams) -> &mut Vec<f64>, &Vec<f64>); 4] = [
                (|p| &mut p.w1, &g.w1),
                (|p| &mut p.b1, &g.b1),
                (|p| &mut p.w2, &g.w2),
                (|p| &mut p.b2, &g.b2),
            ];
            for (field, analytic) in fields {
                for i in 0..analytic.len() {
                    let mut plus = p.clone();
                    field(&mut plus)[i] += eps;
                    let mut minus = p.clone();
                    field(&mut minus)[i] -= eps;
                    let fd = (contracted(&plus, &f, &lg) - contracted(&minus, &f, &lg)) / (2.0 * eps);
                    assert!(rel_err(fd, analytic[i]) <= 1e-4, "fd {fd} vs {}", analytic[i]);
                }
            }
        }
    }

    #[test]
    fn zero_loss_grad_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = DecoderParams::random(3, 4, 2, &mut rng);
        let f = random_frame(&mut rng, 2, 3);
        let g = decoder_grad(&p, &f, &DetectionTensor::zeros(p.grid_shape(2))).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_channel_gradient_is_sparse_in_last_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = DecoderParams::random(3, 4, 2, &mut rng);
        let f = random_frame(&mut rng, 2, 3);
        let mut lg = DetectionTensor::zeros(p.grid_shape(2));
        lg.set(1, 0, 3, 1.0);
        let g = decoder_grad(&p, &f, &lg).unwrap();
        for o in 0..p.outputs() {
            let row = &g.w2[o * p.hidden..(o + 1) * p.hidden];
            if o == 3 {
                assert!(row.iter().any(|&v| v != 0.0));
            } else {
                assert!(row.iter().all(|&v| v == 0.0));
                assert_eq!(g.b2[o], 0.0);
            }
        }
    }

    #[test]
    fn sgd_step_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = DecoderParams::random(3, 4, 2, &mut rng);
        let zero = p.zero_grad();
        let same = sgd_step(&p, &zero, 0.1).unwrap();
        assert_eq!(same.w1, p.w1);
        assert_eq!(same.version, p.version + 1);

        let as_grad = DecoderGrad {
            w1: p.w1.clone(),
            b1: p.b1.clone(),
            w2: p.w2.clone(),
            b2: p.b2.clone(),
        };
        let cleared = sgd_step(&p, &as_grad, 1.0).unwrap();
        assert!(cleared.w1.iter().chain(&cleared.w2).all(|&v| v == 0.0));

        let mut bad = zero.clone();
        bad.b1[0] = f64::NAN;
        assert!(matches!(sgd_step(&p, &bad, 0.1), Err(Error::NonFinite(_))));
        assert!(sgd_step(&p, &zero, 0.0).is_err());
    }

    #[test]
    fn descent_on_fixed_regression_target_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let teacher = DecoderParams::random(3, 5, 2, &mut rng);
        let mut p = DecoderParams::random(3, 5, 2, &mut rng);
        let f = random_frame(&mut rng, 3, 3);
        let target = decoder_forward(&teacher, &f).unwrap();
        let n = target.values().len() as f64;
        let mse = |p: &DecoderParams| -> f64 {
            let y = decoder_forward(p, &f).unwrap();
            y.values()
                .iter()
                .zip(target.values())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                / n
        };
        let mut prev = mse(&p);
        for _ in 0..100 {
            let y = decoder_forward(&p, &f).unwrap();
            let g: Vec<f64> = y
                .values()
                .iter()
                .zip(target.values())
                .map(|(a, b)| 2.0 * (a - b) / n)
                .collect();
            let lg = DetectionTensor::from_values(y.shape(), g).unwrap();
            p = sgd_step(&p, &decoder_grad(&p, &f, &lg).unwrap(), 0.05).unwrap();
            let cur = mse(&p);
            assert!(cur < prev);
            prev = cur;
        }
        assert_eq!(p.version, 100);
    }
}
