//! Distillation losses and the decoder update performed on a key frame.
//!
//! [`tkd_loss`] is the loss the adaptive decoder is trained with: cells the
//! oracle is confident about are regressed onto the oracle directly, the rest
//! onto a blend `lambda * student + (1 - lambda) * oracle` so that oracle noise
//! in empty regions pulls on the student only partially. The blend uses the
//! student's values as constants.
//!
//! [`general_distill_loss`] and [`nms_loss`] are baselines that operate on
//! decoded boxes. They exist for comparison and cost benchmarking and are
//! never used to train.

use serde::{Deserialize, Serialize};

use crate::detection::{decode_tensor, iou, nms, partition_cells, CellMask, Detection, DetectionTensor};
use crate::error::{Error, Result};
use crate::models::{decoder_forward, decoder_grad, sgd_step, DecoderParams, FeatureFrame};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    /// Weight of the student's own value in the empty-cell target.
    pub lambda: f64,
    /// Oracle objectness probability at or above which a cell counts as
    /// containing an object.
    pub theta_h: f64,
    /// Ground-truth weight of [`general_distill_loss`].
    pub beta: f64,
    pub lr: f64,
    /// Gradient steps per distillation event.
    pub steps_per_event: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda: 0.4,
            theta_h: 0.5,
            beta: 0.5,
            lr: 1e-2,
            steps_per_event: 5,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("distill.lambda", "must lie in [0, 1]"));
        }
        if !(self.theta_h > 0.0 && self.theta_h < 1.0) {
            return Err(Error::config("distill.theta_h", "must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::config("distill.beta", "must lie in [0, 1]"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("distill.lr", "must be > 0"));
        }
        if self.steps_per_event == 0 {
            return Err(Error::config("distill.steps_per_event", "must be >= 1"));
        }
        Ok(())
    }
}

/// What triggered a distillation event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionSource {
    Lstm,
    Random,
    Both,
    /// A baseline selector (periodic, scene change).
    Schedule,
}

/// Outcome of one distillation event, measured on the key frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub frame_id: u64,
    pub loss_before: f64,
    pub loss_after: f64,
    pub delta_l: f64,
    pub decision_source: DecisionSource,
    /// Decoder version produced by the event.
    pub version: u64,
}

/// Builds the regression target: oracle values on high-objectness cells,
/// `lambda * student + (1 - lambda) * oracle` elsewhere.
pub fn compose_target(
    student: &DetectionTensor,
    oracle: &DetectionTensor,
    cfg: &DistillConfig,
) -> Result<DetectionTensor> {
    student.shape().check_same(&oracle.shape())?;
    let (high, _) = partition_cells(oracle, cfg.theta_h);
    Ok(compose_with(student, oracle, &high, cfg.lambda))
}

fn compose_with(student: &DetectionTensor, oracle: &DetectionTensor, high: &CellMask, lambda: f64) -> DetectionTensor {
    let mut target = oracle.clone();
    for i in 0..oracle.shape().cells() {
        if high.contains(i) {
            continue;
        }
        for (t, &s) in target.cell_mut(i).iter_mut().zip(student.cell(i)) {
            *t = lambda * s + (1.0 - lambda) * *t;
        }
    }
    target
}

/// The two mean-reduced terms of [`tkd_loss`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TkdTerms {
    pub high: f64,
    pub empty: f64,
}

impl TkdTerms {
    pub fn total(&self) -> f64 {
        self.high + self.empty
    }
}

/// Mean squared error against the composed target over each partition.
pub fn tkd_terms(student: &DetectionTensor, oracle: &DetectionTensor, cfg: &DistillConfig) -> Result<TkdTerms> {
    student.shape().check_same(&oracle.shape())?;
    let (high, _) = partition_cells(oracle, cfg.theta_h);
    Ok(terms_with(student, oracle, &high, cfg.lambda))
}

fn terms_with(student: &DetectionTensor, oracle: &DetectionTensor, high: &CellMask, lambda: f64) -> TkdTerms {
    let (mut sh, mut nh, mut se, mut ne) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..oracle.shape().cells() {
        let (s, o) = (student.cell(i), oracle.cell(i));
        if high.contains(i) {
            sh += s.iter().zip(o).map(|(s, o)| (s - o) * (s - o)).sum::<f64>();
            nh += s.len();
        } else {
            se += s
                .iter()
                .zip(o)
                .map(|(s, o)| {
                    let r = s - (lambda * s + (1.0 - lambda) * o);
                    r * r
                })
                .sum::<f64>();
            ne += s.len();
        }
    }
    TkdTerms {
        high: if nh > 0 { sh / nh as f64 } else { 0.0 },
        empty: if ne > 0 { se / ne as f64 } else { 0.0 },
    }
}

pub fn tkd_loss(student: &DetectionTensor, oracle: &DetectionTensor, cfg: &DistillConfig) -> Result<f64> {
    Ok(tkd_terms(student, oracle, cfg)?.total())
}

/// Gradient of the target-regression objective with respect to the student
/// tensor, holding the composed target fixed.
pub fn tkd_loss_grad(
    student: &DetectionTensor,
    oracle: &DetectionTensor,
    cfg: &DistillConfig,
) -> Result<DetectionTensor> {
    student.shape().check_same(&oracle.shape())?;
    let (high, _) = partition_cells(oracle, cfg.theta_h);
    Ok(grad_with(student, oracle, &high, cfg.lambda))
}

fn grad_with(student: &DetectionTensor, oracle: &DetectionTensor, high: &CellMask, lambda: f64) -> DetectionTensor {
    let shape = oracle.shape();
    let per_cell = shape.channels();
    let nh = high.count() * per_cell;
    let ne = (shape.cells() - high.count()) * per_cell;
    let target = compose_with(student, oracle, high, lambda);
    let mut g = DetectionTensor::zeros(shape);
    for i in 0..shape.cells() {
        let n = if high.contains(i) { nh } else { ne };
        let scale = 2.0 / n as f64;
        for ((gv, &s), &t) in g.cell_mut(i).iter_mut().zip(student.cell(i)).zip(target.cell(i)) {
            *gv = scale * (s - t);
        }
    }
    g
}

/// Runs `steps_per_event` gradient steps of the adaptive decoder toward the
/// oracle tensor of one key frame, recomposing the target before each step.
///
/// On a non-finite loss the event is abandoned and the input parameters
/// remain the caller's to keep.
pub fn distill_step(
    params: &DecoderParams,
    features: &FeatureFrame,
    oracle: &DetectionTensor,
    cfg: &DistillConfig,
) -> Result<(DecoderParams, FeedbackRecord)> {
    let (high, _) = partition_cells(oracle, cfg.theta_h);
    let mut out = decoder_forward(params, features)?;
    out.shape().check_same(&oracle.shape())?;
    let loss_before = terms_with(&out, oracle, &high, cfg.lambda).total();
    if !loss_before.is_finite() {
        return Err(Error::NonFinite(format!(
            "distillation loss before update on frame {}",
            features.frame_id
        )));
    }
    let mut p = params.clone();
    for _ in 0..cfg.steps_per_event {
        let g_out = grad_with(&out, oracle, &high, cfg.lambda);
        let g = decoder_grad(&p, features, &g_out)?;
        p = sgd_step(&p, &g, cfg.lr)?;
        out = decoder_forward(&p, features)?;
    }
    let loss_after = terms_with(&out, oracle, &high, cfg.lambda).total();
    if !loss_after.is_finite() {
        return Err(Error::NonFinite(format!(
            "distillation loss after update on frame {}",
            features.frame_id
        )));
    }
    let fb = FeedbackRecord {
        frame_id: features.frame_id,
        loss_before,
        loss_after,
        delta_l: loss_after - loss_before,
        decision_source: DecisionSource::Schedule,
        version: p.version,
    };
    Ok((p, fb))
}

/// Probability floor used by the log terms of the box-level losses.
const LOG_FLOOR: f64 = 1e-3;
/// Matching threshold of the box-level losses.
const MATCH_IOU: f64 = 0.5;

/// Components of a matched-pair box loss.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PairLoss {
    pub bbox: f64,
    pub class: f64,
    pub objectness: f64,
}

impl PairLoss {
    pub fn total(&self) -> f64 {
        self.bbox + self.class + self.objectness
    }
}

fn neg_ln(p: f64) -> f64 {
    -p.max(LOG_FLOOR).ln()
}

/// Greedy matched-pair loss between predictions and targets.
///
/// Predictions are visited by descending confidence; each takes the
/// highest-IOU unmatched target with IOU >= 0.5. A matched pair contributes
/// objectness BCE toward 1, squared box error and class cross-entropy
/// (the residual mass `1 - class_prob` stands in for the probability of a
/// different class). Unmatched predictions pay BCE toward 0 and missed targets
/// pay the floor penalty `-ln(1e-3)`. The sum is divided by the number of
/// targets (at least 1).
pub fn pair_loss(preds: &[Detection], targets: &[Detection]) -> PairLoss {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence));
    let mut taken = vec![false; targets.len()];
    let mut loss = PairLoss::default();
    for i in order {
        let p = &preds[i];
        let best = targets
            .iter()
            .enumerate()
            .filter(|(j, _)| !taken[*j])
            .map(|(j, t)| (j, iou(&p.bbox, &t.bbox)))
            .filter(|&(_, v)| v >= MATCH_IOU)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        match best {
            Some((j, _)) => {
                taken[j] = true;
                let t = &targets[j];
                loss.objectness += neg_ln(p.objectness);
                loss.bbox += (p.bbox.cx - t.bbox.cx).powi(2)
                    + (p.bbox.cy - t.bbox.cy).powi(2)
                    + (p.bbox.w - t.bbox.w).powi(2)
                    + (p.bbox.h - t.bbox.h).powi(2);
                loss.class += if p.class_id == t.class_id {
                    neg_ln(p.class_prob)
                } else {
                    neg_ln(1.0 - p.class_prob)
                };
            }
            None => loss.objectness += neg_ln(1.0 - p.objectness),
        }
    }
    let missed = taken.iter().filter(|&&t| !t).count();
    loss.objectness += missed as f64 * neg_ln(0.0);
    let n = targets.len().max(1) as f64;
    PairLoss {
        bbox: loss.bbox / n,
        class: loss.class / n,
        objectness: loss.objectness / n,
    }
}

/// `beta * L_gt + (1 - beta) * L_t` over decoded detections.
pub fn general_distill_loss(student_dets: &[Detection], gt: &[Detection], oracle_dets: &[Detection], beta: f64) -> f64 {
    let l_gt = if beta > 0.0 {
        pair_loss(student_dets, gt).total()
    } else {
        0.0
    };
    let l_t = if beta < 1.0 {
        pair_loss(student_dets, oracle_dets).total()
    } else {
        0.0
    };
    beta * l_gt + (1.0 - beta) * l_t
}

/// Box-level distillation loss: decode and suppress both tensors, then sum
/// box, class and objectness terms against ground truth and against the
/// teacher's surviving boxes, all weighted equally.
pub fn nms_loss(
    student: &DetectionTensor,
    oracle: &DetectionTensor,
    gt: &[Detection],
    conf_threshold: f64,
    iou_threshold: f64,
) -> Result<f64> {
    student.shape().check_same(&oracle.shape())?;
    let s = nms(&decode_tensor(student, conf_threshold), iou_threshold);
    let t = nms(&decode_tensor(oracle, conf_threshold), iou_threshold);
    let vs_gt = pair_loss(&s, gt);
    let vs_teacher = pair_loss(&s, &t);
    Ok(vs_gt.total() + vs_teacher.total())
}
