//! Detection metrics, the λ sweep, the loss-cost benchmark and key-frame
//! histograms.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detection::{decode_tensor, iou, nms, BoundingBox, Detection, DetectionTensor, GridShape};
use crate::distill::{nms_loss, tkd_loss, DistillConfig};
use crate::error::{Error, Result};
use crate::pipeline::{run, PipelineConfig, PipelineReport, Student};
use crate::sim::{synth_oracle, GroundTruthObject, OracleNoiseSpec, Stream, SyntheticOracle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GtSource {
    TrueGt,
    OracleAsGt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    /// Confidence threshold applied when decoding oracle output as labels.
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub gt_source: GtSource,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: vec![0.5, 0.6, 0.75],
            conf_threshold: 0.5,
            nms_iou: 0.45,
            gt_source: GtSource::OracleAsGt,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.is_empty() {
            return Err(Error::config(
                "eval.iou_thresholds",
                "at least one threshold is required",
            ));
        }
        if self.iou_thresholds.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
            return Err(Error::config("eval.iou_thresholds", "thresholds must lie in (0, 1)"));
        }
        if self.iou_thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(
                "eval.iou_thresholds",
                "thresholds must be strictly increasing",
            ));
        }
        if !(self.conf_threshold > 0.0 && self.conf_threshold < 1.0) {
            return Err(Error::config("eval.conf_threshold", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Metrics at one IOU threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub iou_threshold: f64,
    /// Class-pooled average precision.
    pub ap: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_count: usize,
    /// AP per class; `None` for classes absent from both labels and
    /// detections.
    pub per_class_ap: Vec<Option<f64>>,
    /// Mean of the defined per-class APs.
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub frames: usize,
    pub gt_objects: usize,
    pub gt_source: GtSource,
    pub thresholds: Vec<ThresholdMetrics>,
}

impl EvalSummary {
    pub fn at(&self, iou_threshold: f64) -> Option<&ThresholdMetrics> {
        self.thresholds
            .iter()
            .find(|m| (m.iou_threshold - iou_threshold).abs() < 1e-12)
    }

    /// F1 at the first (loosest) threshold.
    pub fn f1(&self) -> f64 {
        self.thresholds.first().map_or(0.0, |m| m.f1)
    }
}

/// Greedy matching outcome; flags follow the detection order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    pub tp: Vec<bool>,
    pub fp: Vec<bool>,
    pub fn_count: usize,
}

/// Each detection, in the given (descending-confidence) order, claims the
/// unmatched same-class label with the highest IOU at or above
/// `iou_threshold`.
pub fn match_detections(dets: &[Detection], gt: &[Detection], iou_threshold: f64) -> MatchResult {
    let mut used = vec![false; gt.len()];
    let mut tp = Vec::with_capacity(dets.len());
    for d in dets {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gt.iter().enumerate() {
            if used[j] || g.class_id != d.class_id {
                continue;
            }
            let v = iou(&d.bbox, &g.bbox);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
        }
        tp.push(best.is_some());
    }
    let fp = tp.iter().map(|t| !t).collect();
    MatchResult {
        tp,
        fp,
        fn_count: used.iter().filter(|u| !**u).count(),
    }
}

/// All-point interpolated AP over flags ranked by descending confidence.
pub fn average_precision(tp_flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return if tp_flags.is_empty() { 1.0 } else { 0.0 };
    }
    let mut points = Vec::with_capacity(tp_flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &t in tp_flags {
        if t {
            tp += 1;
        } else {
            fp += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    // precision envelope from the right
    for i in (0..points.len().saturating_sub(1)).rev() {
        points[i].1 = points[i].1.max(points[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in points {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap
}

fn prf(tp: usize, fp: usize, fn_count: usize) -> (f64, f64, f64) {
    // with nothing to find and nothing reported the result is perfect
    if tp + fp + fn_count == 0 {
        return (1.0, 1.0, 1.0);
    }
    let p = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let r = if tp + fn_count > 0 {
        tp as f64 / (tp + fn_count) as f64
    } else {
        0.0
    };
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f1)
}

/// Scores per-frame predictions against per-frame labels.
pub fn evaluate_frames(
    preds: &[Vec<Detection>],
    labels: &[Vec<Detection>],
    classes: usize,
    cfg: &EvalConfig,
) -> Result<EvalSummary> {
    cfg.validate()?;
    if preds.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} frames of labels", labels.len()),
            found: format!("{} frames of predictions", preds.len()),
        });
    }
    let gt_objects: usize = labels.iter().map(Vec::len).sum();
    let mut thresholds = Vec::with_capacity(cfg.iou_thresholds.len());
    for &thr in &cfg.iou_thresholds {
        // (confidence, class, tp)
        let mut ranked: Vec<(f64, usize, bool)> = Vec::new();
        let mut fn_count = 0;
        let mut n_gt_class = vec![0usize; classes];
        for (p, g) in preds.iter().zip(labels) {
            let mut dets = p.clone();
            crate::detection::sort_by_confidence(&mut dets);
            let m = match_detections(&dets, g, thr);
            fn_count += m.fn_count;
            ranked.extend(dets.iter().zip(&m.tp).map(|(d, &t)| (d.confidence, d.class_id, t)));
            for l in g {
                if l.class_id < classes {
                    n_gt_class[l.class_id] += 1;
                }
            }
        }
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
        let flags: Vec<bool> = ranked.iter().map(|r| r.2).collect();
        let tp = flags.iter().filter(|t| **t).count();
        let fp = flags.len() - tp;
        let (precision, recall, f1) = prf(tp, fp, fn_count);
        let per_class_ap: Vec<Option<f64>> = (0..classes)
            .map(|k| {
                let f: Vec<bool> = ranked.iter().filter(|r| r.1 == k).map(|r| r.2).collect();
                if f.is_empty() && n_gt_class[k] == 0 {
                    None
                } else {
                    Some(average_precision(&f, n_gt_class[k]))
                }
            })
            .collect();
        let defined: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
        let map = if defined.is_empty() {
            1.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        };
        thresholds.push(ThresholdMetrics {
            iou_threshold: thr,
            ap: average_precision(&flags, gt_objects),
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_count,
            per_class_ap,
            map,
        });
    }
    Ok(EvalSummary {
        frames: preds.len(),
        gt_objects,
        gt_source: cfg.gt_source,
        thresholds,
    })
}

/// Oracle output decoded the same way student output is.
pub fn oracle_detections(tensor: &DetectionTensor, cfg: &EvalConfig) -> Vec<Detection> {
    nms(&decode_tensor(tensor, cfg.conf_threshold), cfg.nms_iou)
}

/// Per-frame labels for `stream` under `cfg.gt_source`.
pub fn labels_for(stream: &Stream, oracle: &SyntheticOracle, cfg: &EvalConfig) -> Vec<Vec<Detection>> {
    stream
        .frames
        .iter()
        .map(|f| match cfg.gt_source {
            GtSource::TrueGt => f.gt.iter().map(GroundTruthObject::as_detection).collect(),
            GtSource::OracleAsGt => oracle_detections(&oracle.tensor_for(f), cfg),
        })
        .collect()
}

/// Scores a run report against `stream`. Frames missing from an aborted
/// report are not scored.
pub fn evaluate_report(
    report: &PipelineReport,
    stream: &Stream,
    oracle: &SyntheticOracle,
    cfg: &EvalConfig,
) -> Result<EvalSummary> {
    let n = report.frames.len();
    if n > stream.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("at most {} frames", stream.len()),
            found: format!("{n} frames in report"),
        });
    }
    let part = Stream {
        header: stream.header,
        frames: stream.frames[..n].to_vec(),
    };
    let labels = labels_for(&part, oracle, cfg);
    let preds: Vec<Vec<Detection>> = report.frames.iter().map(|f| f.detections.clone()).collect();
    evaluate_frames(&preds, &labels, stream.header.c, cfg)
}

/// Runs and scores; the report comes back with `eval` filled in.
pub fn run_and_evaluate(
    stream: &Stream,
    cfg: &PipelineConfig,
    student: &Student,
    eval: &EvalConfig,
) -> Result<crate::pipeline::RunOutcome> {
    let mut out = run(stream, cfg, student)?;
    out.report.eval = Some(evaluate_report(&out.report, stream, &cfg.oracle(stream), eval)?);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaRow {
    pub lambda: f64,
    pub ap: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub key_frames: usize,
    pub key_frame_fraction: f64,
}

/// One full pipeline run per λ, all with the same stream, student and
/// seeds, scored against oracle output at the first IOU threshold.
pub fn ablate_lambda(
    stream: &Stream,
    lambdas: &[f64],
    cfg: &PipelineConfig,
    student: &Student,
    eval: &EvalConfig,
) -> Result<Vec<LambdaRow>> {
    let eval = EvalConfig {
        gt_source: GtSource::OracleAsGt,
        ..eval.clone()
    };
    lambdas
        .iter()
        .map(|&lambda| {
            let mut c = *cfg;
            c.distill.lambda = lambda;
            let out = run_and_evaluate(stream, &c, student, &eval)?;
            let r = out.report;
            let m = &r.eval.as_ref().expect("evaluated above").thresholds[0];
            Ok(LambdaRow {
                lambda,
                ap: m.ap,
                f1: m.f1,
                tp: m.tp,
                fp: m.fp,
                key_frames: r.key_frames,
                key_frame_fraction: r.key_frame_fraction,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCostRow {
    pub n_targets: usize,
    pub tkd_us: f64,
    pub nms_us: f64,
    /// `nms_us / tkd_us`.
    pub ratio: f64,
}

/// Grid side used by the loss-cost benchmark; large enough for 50 objects
/// in distinct cells.
pub const BENCH_GRID: usize = 13;
const BENCH_CLASSES: usize = 4;
/// Loss evaluations per timed sample.
const BENCH_BATCH: usize = 20;

/// Oracle tensor with `n` objects in distinct cells and a noisy student
/// copy of it.
pub fn bench_tensors(n: usize, seed: u64) -> Result<(DetectionTensor, DetectionTensor, Vec<GroundTruthObject>)> {
    let shape = GridShape::new(BENCH_GRID, BENCH_CLASSES)?;
    if n > shape.cells() {
        return Err(Error::config(
            "bench.target_counts",
            format!("at most {} targets fit the benchmark grid", shape.cells()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ n as u64);
    let mut cells: Vec<usize> = (0..shape.cells()).collect();
    for i in (1..cells.len()).rev() {
        cells.swap(i, rng.random_range(0..=i));
    }
    let s = BENCH_GRID as f64;
    let gt: Vec<GroundTruthObject> = cells[..n]
        .iter()
        .enumerate()
        .map(|(k, &idx)| {
            let (row, col) = (idx / BENCH_GRID, idx % BENCH_GRID);
            GroundTruthObject {
                bbox: BoundingBox {
                    cx: (col as f64 + rng.random_range(0.2..0.8)) / s,
                    cy: (row as f64 + rng.random_range(0.2..0.8)) / s,
                    w: rng.random_range(0.05..0.2),
                    h: rng.random_range(0.05..0.2),
                },
                class_id: rng.random_range(0..BENCH_CLASSES),
                object_id: k as u64,
            }
        })
        .collect();
    let oracle = synth_oracle(&gt, &OracleNoiseSpec::clean(), shape, &mut rng);
    let mut student = oracle.clone();
    for v in student.values_mut() {
        *v += rng.random_range(-0.3..0.3);
    }
    Ok((student, oracle, gt))
}

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort();
    v[v.len() / 2]
}

/// Median per-call time of both losses for each target count. Each trial
/// times a batch of calls; one untimed warm-up batch precedes the trials.
pub fn bench_loss_cost(target_counts: &[usize], trials: usize, seed: u64) -> Result<Vec<LossCostRow>> {
    if trials < 30 {
        return Err(Error::config("bench.trials", "at least 30 trials are required"));
    }
    let cfg = DistillConfig::default();
    let mut rows = Vec::with_capacity(target_counts.len());
    for &n in target_counts {
        let (student, oracle, gt) = bench_tensors(n, seed)?;
        let gt_dets: Vec<Detection> = gt.iter().map(GroundTruthObject::as_detection).collect();
        let time_tkd = || -> Result<Duration> {
            let t = Instant::now();
            for _ in 0..BENCH_BATCH {
                std::hint::black_box(tkd_loss(std::hint::black_box(&student), &oracle, &cfg)?);
            }
            Ok(t.elapsed())
        };
        let time_nms = || -> Result<Duration> {
            let t = Instant::now();
            for _ in 0..BENCH_BATCH {
                std::hint::black_box(nms_loss(std::hint::black_box(&student), &oracle, &gt_dets, 0.5, 0.45)?);
            }
            Ok(t.elapsed())
        };
        time_tkd()?;
        time_nms()?;
        let mut tkd = Vec::with_capacity(trials);
        let mut nmsl = Vec::with_capacity(trials);
        // interleaved so that slow phases of the machine hit both losses
        for _ in 0..trials {
            tkd.push(time_tkd()?);
            nmsl.push(time_nms()?);
        }
        let per_call = |d: Duration| d.as_secs_f64() * 1e6 / BENCH_BATCH as f64;
        let tkd_us = per_call(median(tkd));
        let nms_us = per_call(median(nmsl));
        rows.push(LossCostRow {
            n_targets: n,
            tkd_us,
            nms_us,
            ratio: if tkd_us > 0.0 { nms_us / tkd_us } else { f64::INFINITY },
        });
    }
    Ok(rows)
}

/// Positive decisions per consecutive block of `bin_size` frames; the last
/// bin may be partial.
pub fn keyframe_histogram(report: &PipelineReport, bin_size: usize) -> Result<Vec<usize>> {
    let flags: Vec<bool> = report.decisions().map(|d| d.train).collect();
    histogram_of(&flags, bin_size)
}

pub fn histogram_of(flags: &[bool], bin_size: usize) -> Result<Vec<usize>> {
    if bin_size == 0 {
        return Err(Error::config("bin_size", "must be >= 1"));
    }
    Ok(flags
        .chunks(bin_size)
        .map(|c| c.iter().filter(|f| **f).count())
        .collect())
}

/// Plain-text table with right-aligned columns.
pub fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        let _ = writeln!(out, "{}", parts.join("  "));
    };
    line(headers.to_vec(), &mut out);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    let _ = writeln!(out, "{}", rule.join("  "));
    for r in rows {
        line(r.iter().map(String::as_str).collect(), &mut out);
    }
    out
}

pub fn lambda_table(rows: &[LambdaRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                format!("{:.1}", r.lambda),
                format!("{:.4}", r.ap),
                format!("{:.4}", r.f1),
                r.tp.to_string(),
                r.fp.to_string(),
                r.key_frames.to_string(),
                format!("{:.3}", r.key_frame_fraction),
            ]
        })
        .collect();
    render_table(&["lambda", "AP", "F1", "TP", "FP", "keys", "key_frac"], &body)
}

pub fn loss_cost_table(rows: &[LossCostRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.n_targets.to_string(),
                format!("{:.2}", r.tkd_us),
                format!("{:.2}", r.nms_us),
                format!("{:.2}", r.ratio),
            ]
        })
        .collect();
    render_table(&["targets", "tkd_us", "nms_us", "nms/tkd"], &body)
}

pub fn summary_table(summary: &EvalSummary) -> String {
    let body: Vec<Vec<String>> = summary
        .thresholds
        .iter()
        .map(|m| {
            vec![
                format!("{:.2}", m.iou_threshold),
                format!("{:.4}", m.ap),
                format!("{:.4}", m.map),
                format!("{:.4}", m.precision),
                format!("{:.4}", m.recall),
                format!("{:.4}", m.f1),
                m.tp.to_string(),
                m.fp.to_string(),
                m.fn_count.to_string(),
            ]
        })
        .collect();
    render_table(&["iou", "AP", "mAP", "P", "R", "F1", "TP", "FP", "FN"], &body)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(cx: f64, cy: f64, class_id: usize, confidence: f64) -> Detection {
        Detection {
            bbox: BoundingBox::new(cx, cy, 0.2, 0.2).unwrap(),
            class_id,
            confidence,
            objectness: confidence,
            class_prob: 1.0,
        }
    }

    #[test]
    fn perfect_and_empty_matches() {
        let gt = vec![det(0.2, 0.2, 0, 1.0), det(0.7, 0.7, 1, 1.0)];
        let m = match_detections(&gt, &gt, 0.5);
        assert_eq!(m.tp, vec![true, true]);
        assert_eq!(m.fn_count, 0);
        let m = match_detections(&[], &gt, 0.5);
        assert_eq!(m.fn_count, 2);
    }

    /// Maximum number of same-class pairs with IOU >= thr over all
    /// injective assignments.
    fn brute_force_max(dets: &[Detection], gt: &[Detection], thr: f64) -> usize {
        fn go(i: usize, dets: &[Detection], gt: &[Detection], used: &mut Vec<bool>, thr: f64) -> usize {
            if i == dets.len() {
                return 0;
            }
            let mut best = go(i + 1, dets, gt, used, thr);
            for j in 0..gt.len() {
                if !used[j] && gt[j].class_id == dets[i].class_id && iou(&dets[i].bbox, &gt[j].bbox) >= thr {
                    used[j] = true;
                    best = best.max(1 + go(i + 1, dets, gt, used, thr));
                    used[j] = false;
                }
            }
            best
        }
        go(0, dets, gt, &mut vec![false; gt.len()], thr)
    }

    #[test]
    fn greedy_matches_optimal_on_crafted_case() {
        let gt = vec![det(0.2, 0.2, 0, 1.0), det(0.5, 0.5, 0, 1.0), det(0.8, 0.3, 1, 1.0)];
        let dets = vec![
            det(0.21, 0.2, 0, 0.9),
            det(0.52, 0.51, 0, 0.8),
            det(0.8, 0.31, 1, 0.7),
            det(0.5, 0.49, 0, 0.6),
            det(0.1, 0.9, 1, 0.5),
        ];
        let m = match_detections(&dets, &gt, 0.5);
        let tp = m.tp.iter().filter(|t| **t).count();
        assert_eq!(tp, brute_force_max(&dets, &gt, 0.5));
        assert_eq!(tp, 3);
        assert_eq!(m.tp, vec![true, true, true, false, false]);
        assert_eq!(m.fn_count, 0);
    }

    #[test]
    fn ap_cases() {
        assert_eq!(average_precision(&[true, true, true], 3), 1.0);
        assert_eq!(average_precision(&[false, false], 3), 0.0);
        assert!((average_precision(&[true, false, true], 2) - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(average_precision(&[], 0), 1.0);
        assert_eq!(average_precision(&[false], 0), 0.0);
    }

    #[test]
    fn self_evaluation_is_perfect() {
        let labels = vec![
            vec![det(0.2, 0.2, 0, 1.0)],
            vec![],
            vec![det(0.5, 0.5, 1, 1.0), det(0.8, 0.8, 2, 1.0)],
        ];
        let s = evaluate_frames(&labels, &labels, 3, &EvalConfig::default()).unwrap();
        for m in &s.thresholds {
            assert_eq!((m.ap, m.f1, m.map), (1.0, 1.0, 1.0));
            assert_eq!(m.tp + m.fn_count, 3);
        }
    }

    #[test]
    fn thresholds_validated() {
        let bad = EvalConfig {
            iou_thresholds: vec![0.6, 0.5],
            ..EvalConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = EvalConfig {
            iou_thresholds: vec![0.5, 1.0],
            ..EvalConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn histogram_cases() {
        assert_eq!(histogram_of(&[true; 30], 10).unwrap(), vec![10, 10, 10]);
        assert_eq!(histogram_of(&[true, false, true], 2).unwrap(), vec![1, 1]);
        assert!(histogram_of(&[true], 0).is_err());
    }

    #[test]
    fn zero_target_losses_are_finite() {
        let (s, o, gt) = bench_tensors(0, 1).unwrap();
        assert!(tkd_loss(&s, &o, &DistillConfig::default()).unwrap().is_finite());
        let dets: Vec<Detection> = gt.iter().map(GroundTruthObject::as_detection).collect();
        assert!(nms_loss(&s, &o, &dets, 0.5, 0.45).unwrap().is_finite());
    }

    #[test]
    fn bench_requires_trials() {
        assert!(bench_loss_cost(&[1], 5, 0).is_err());
        let rows = bench_loss_cost(&[1, 5], 30, 0).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.tkd_us > 0.0 && r.nms_us > 0.0));
    }

    #[test]
    fn table_is_aligned() {
        let t = render_table(&["a", "long"], &[vec!["123".into(), "4".into()]]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines.iter().all(|l| l.len() == lines[0].len()));
    }

    fn flags() -> impl Strategy<Value = Vec<bool>> {
        prop::collection::vec(any::<bool>(), 0..40)
    }

    proptest! {
        #[test]
        fn ap_drops_when_fps_lead(f in flags(), extra in 1usize..5) {
            let n_gt = f.iter().filter(|t| **t).count().max(1);
            let base = average_precision(&f, n_gt);
            let mut worse = vec![false; extra];
            worse.extend(&f);
            prop_assert!(average_precision(&worse, n_gt) <= base + 1e-12);
            prop_assert!((0.0..=1.0).contains(&base));
        }

        #[test]
        fn prf_bounds(tp in 0usize..50, fp in 0usize..50, fn_count in 0usize..50) {
            let (p, r, f1) = prf(tp, fp, fn_count);
            for v in [p, r, f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(f1 <= (2.0 * p).min(2.0 * r) + 1e-12);
            if tp + fp + fn_count > 0 && p + r > 0.0 {
                prop_assert!((f1 - 2.0 * p * r / (p + r)).abs() < 1e-12);
            }
        }
    }
}
