//! Grid detection tensors, box geometry, decoding and non-maximum suppression.
//!
//! A [`DetectionTensor`] holds one prediction per grid cell laid out as
//! `[objectness, tx, ty, tw, th, class_0 .. class_{c-1}]`. Objectness and
//! class channels are stored as pre-activation logits. Box channels decode
//! through a sigmoid: the center offset is relative to the owning cell and
//! the extent is a fraction of the image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel index of the objectness logit.
pub const OBJECTNESS: usize = 0;
/// Number of channels that precede the class logits.
pub const BOX_CHANNELS: usize = 5;

/// Smallest probability produced by [`logit`]'s clamp.
const PROB_EPS: f64 = 1e-9;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`], with the argument clamped away from 0 and 1.
#[inline]
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    (p / (1.0 - p)).ln()
}

/// Numerically stable softmax of `logits` written into `out`.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Grid geometry: `s` cells per side and `c` classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridShape {
    pub s: usize,
    pub c: usize,
}

impl GridShape {
    pub fn new(s: usize, c: usize) -> Result<Self> {
        if s == 0 {
            return Err(Error::config("grid.s", "cells per side must be >= 1"));
        }
        if c == 0 {
            return Err(Error::config("grid.c", "class count must be >= 1"));
        }
        Ok(Self { s, c })
    }

    #[inline]
    pub fn channels(&self) -> usize {
        BOX_CHANNELS + self.c
    }

    #[inline]
    pub fn cells(&self) -> usize {
        self.s * self.s
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.cells() * self.channels()
    }

    /// Cell that owns the normalized point `(x, y)`.
    pub fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        let s = self.s as f64;
        let col = ((x * s).floor() as isize).clamp(0, self.s as isize - 1) as usize;
        let row = ((y * s).floor() as isize).clamp(0, self.s as isize - 1) as usize;
        (row, col)
    }

    pub(crate) fn check_same(&self, other: &GridShape) -> Result<()> {
        if self != other {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}x{}", self.s, self.s, self.channels()),
                found: format!("{}x{}x{}", other.s, other.s, other.channels()),
            });
        }
        Ok(())
    }
}

/// Dense `s x s x (5 + c)` prediction grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionTensor {
    shape: GridShape,
    values: Vec<f64>,
}

impl DetectionTensor {
    pub fn zeros(shape: GridShape) -> Self {
        Self {
            shape,
            values: vec![0.0; shape.len()],
        }
    }

    pub fn from_values(shape: GridShape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values", shape.len()),
                found: format!("{} values", values.len()),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor value at flat index {i}")));
        }
        Ok(Self { shape, values })
    }

    #[inline]
    pub fn shape(&self) -> GridShape {
        self.shape
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    fn offset(&self, row: usize, col: usize) -> usize {
        (row * self.shape.s + col) * self.shape.channels()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.values[self.offset(row, col) + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f64) {
        let o = self.offset(row, col);
        self.values[o + ch] = v;
    }

    /// All channels of one cell, indexed by flat cell index `row * s + col`.
    #[inline]
    pub fn cell(&self, index: usize) -> &[f64] {
        let n = self.shape.channels();
        &self.values[index * n..(index + 1) * n]
    }

    #[inline]
    pub fn cell_mut(&mut self, index: usize) -> &mut [f64] {
        let n = self.shape.channels();
        &mut self.values[index * n..(index + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Writes `bbox` into the box channels of the cell owning its center.
    /// Returns the `(row, col)` that was written.
    pub fn encode_box(&mut self, bbox: &BoundingBox) -> (usize, usize) {
        let (row, col) = self.shape.cell_of(bbox.cx, bbox.cy);
        let [tx, ty, tw, th] = box_logits(self.shape, bbox, row, col);
        let o = self.offset(row, col);
        self.values[o + 1] = tx;
        self.values[o + 2] = ty;
        self.values[o + 3] = tw;
        self.values[o + 4] = th;
        (row, col)
    }
}

/// Box-channel logits that decode to `bbox` from cell `(row, col)`.
pub fn box_logits(shape: GridShape, bbox: &BoundingBox, row: usize, col: usize) -> [f64; 4] {
    let s = shape.s as f64;
    [
        logit(bbox.cx * s - col as f64),
        logit(bbox.cy * s - row as f64),
        logit(bbox.w),
        logit(bbox.h),
    ]
}

/// Per-cell boolean mask over a grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellMask {
    shape: GridShape,
    flags: Vec<bool>,
}

impl CellMask {
    pub fn new(shape: GridShape, flags: Vec<bool>) -> Result<Self> {
        if flags.len() != shape.cells() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} cells", shape.cells()),
                found: format!("{} cells", flags.len()),
            });
        }
        Ok(Self { shape, flags })
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    #[inline]
    pub fn contains(&self, index: usize) -> bool {
        self.flags[index]
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            shape: self.shape,
            flags: self.flags.iter().map(|f| !f).collect(),
        }
    }
}

/// Axis-aligned box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || ![cx, cy, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidBox { cx, cy, w, h });
        }
        Ok(Self { cx, cy, w, h })
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    #[inline]
    fn bounds(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn intersection(&self, other: &BoundingBox) -> f64 {
        let (ax0, ay0, ax1, ay1) = self.bounds();
        let (bx0, by0, bx1, by1) = other.bounds();
        let w = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
        let h = (ay1.min(by1) - ay0.max(by0)).max(0.0);
        w * h
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// A decoded box with class and score.
///
/// `confidence` is `objectness * class_prob`; the two factors are kept so
/// that matched-pair losses can penalize them separately.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub class_id: usize,
    pub confidence: f64,
    pub objectness: f64,
    pub class_prob: f64,
}

impl Detection {
    /// A certain detection, used for ground-truth labels.
    pub fn certain(bbox: BoundingBox, class_id: usize) -> Self {
        Self {
            bbox,
            class_id,
            confidence: 1.0,
            objectness: 1.0,
            class_prob: 1.0,
        }
    }
}

/// Decodes one candidate per cell and keeps those scoring at least
/// `conf_threshold`, sorted by descending confidence.
pub fn decode_tensor(t: &DetectionTensor, conf_threshold: f64) -> Vec<Detection> {
    let shape = t.shape();
    let s = shape.s as f64;
    let mut probs = vec![0.0; shape.c];
    let mut out = Vec::new();
    for row in 0..shape.s {
        for col in 0..shape.s {
            let cell = t.cell(row * shape.s + col);
            let objectness = sigmoid(cell[OBJECTNESS]);
            // confidence <= objectness, so low-objectness cells cannot pass
            if objectness < conf_threshold {
                continue;
            }
            softmax_into(&cell[BOX_CHANNELS..], &mut probs);
            let (class_id, class_prob) = probs.iter().copied().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |best, (i, p)| {
                    if p > best.1 {
                        (i, p)
                    } else {
                        best
                    }
                },
            );
            let confidence = objectness * class_prob;
            if confidence < conf_threshold {
                continue;
            }
            let bbox = BoundingBox {
                cx: (col as f64 + sigmoid(cell[1])) / s,
                cy: (row as f64 + sigmoid(cell[2])) / s,
                w: sigmoid(cell[3]),
                h: sigmoid(cell[4]),
            };
            out.push(Detection {
                bbox,
                class_id,
                confidence,
                objectness,
                class_prob,
            });
        }
    }
    sort_by_confidence(&mut out);
    out
}

/// Stable descending sort on confidence.
pub fn sort_by_confidence(dets: &mut [Detection]) {
    dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
}

/// Class-aware greedy non-maximum suppression.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sort_by_confidence(&mut sorted);
    let mut keep: Vec<Detection> = Vec::with_capacity(sorted.len());
    for d in sorted {
        let suppressed = keep
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            keep.push(d);
        }
    }
    keep
}

/// Splits the grid into cells where the oracle expects an object
/// (`sigmoid(objectness) >= theta_h`) and the remaining cells.
pub fn partition_cells(oracle: &DetectionTensor, theta_h: f64) -> (CellMask, CellMask) {
    let shape = oracle.shape();
    let high: Vec<bool> = (0..shape.cells())
        .map(|i| sigmoid(oracle.cell(i)[OBJECTNESS]) >= theta_h)
        .collect();
    let h = CellMask { shape, flags: high };
    let e = h.complement();
    (h, e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(cx: f64, cy: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(cx, cy, w, h).unwrap()
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = bx(0.3, 0.4, 0.2, 0.1);
        assert_relative_eq!(iou(&a, &a), 1.0, epsilon = 1e-12);
        let l = bx(0.2, 0.5, 0.1, 0.1);
        let r = bx(0.8, 0.5, 0.1, 0.1);
        assert_eq!(iou(&l, &r), 0.0);
    }

    #[test]
    fn iou_partial_overlap_closed_form() {
        // overlap strip 0.2 wide, 0.4 tall
        let expected = (0.2 * 0.4) / (2.0 * 0.16 - 0.08);
        let a = bx(0.5, 0.5, 0.4, 0.4);
        let b = bx(0.7, 0.5, 0.4, 0.4);
        assert_relative_eq!(iou(&a, &b), expected, epsilon = 1e-12);
        assert_relative_eq!(iou(&a, &b), 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(BoundingBox::new(0.5, 0.5, 0.0, 0.1).is_err());
        assert!(BoundingBox::new(0.5, 0.5, 0.1, -0.1).is_err());
        assert!(BoundingBox::new(f64::NAN, 0.5, 0.1, 0.1).is_err());
    }

    #[test]
    fn zero_tensor_decodes_empty() {
        let t = DetectionTensor::zeros(GridShape::new(4, 3).unwrap());
        assert!(decode_tensor(&t, 0.5).is_empty());
    }

    #[test]
    fn saturated_cell_decodes_one_detection() {
        let shape = GridShape::new(4, 3).unwrap();
        let mut t = DetectionTensor::zeros(shape);
        for i in 0..shape.cells() {
            t.cell_mut(i)[0] = -10.0;
        }
        t.set(1, 2, 0, 10.0);
        t.set(1, 2, 5, 10.0);
        t.set(1, 2, 6, -10.0);
        t.set(1, 2, 7, -10.0);
        let dets = decode_tensor(&t, 0.5);
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].class_id, 0);
        assert!(dets[0].confidence > 0.9999);
        assert_relative_eq!(dets[0].bbox.cx, 2.5 / 4.0, epsilon = 1e-12);
        assert_relative_eq!(dets[0].bbox.cy, 1.5 / 4.0, epsilon = 1e-12);
    }

    /// Per-cell brute force: softmax, argmax and threshold without the
    /// objectness early exit.
    fn brute_decode(t: &DetectionTensor, thr: f64) -> Vec<(usize, usize, f64)> {
        let shape = t.shape();
        let mut out = Vec::new();
        for idx in 0..shape.cells() {
            let cell = t.cell(idx);
            let obj = 1.0 / (1.0 + (-cell[0]).exp());
            let exps: Vec<f64> = cell[5..].iter().map(|v| v.exp()).collect();
            let z: f64 = exps.iter().sum();
            let mut best = 0;
            for k in 1..shape.c {
                if exps[k] > exps[best] {
                    best = k;
                }
            }
            let conf = obj * exps[best] / z;
            if conf >= thr {
                out.push((idx, best, conf));
            }
        }
        out.sort_by(|a, b| b.2.total_cmp(&a.2));
        out
    }

    #[test]
    fn decode_matches_brute_force() {
        let shape = GridShape::new(4, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let vals: Vec<f64> = (0..shape.len()).map(|_| rng.random_range(-4.0..4.0)).collect();
            let t = DetectionTensor::from_values(shape, vals).unwrap();
            let fast = decode_tensor(&t, 0.3);
            let slow = brute_decode(&t, 0.3);
            assert_eq!(fast.len(), slow.len());
            for (d, (idx, cls, conf)) in fast.iter().zip(&slow) {
                assert_eq!(d.class_id, *cls);
                assert_relative_eq!(d.confidence, *conf, epsilon = 1e-12);
                let (row, col) = shape.cell_of(d.bbox.cx, d.bbox.cy);
                assert_eq!(row * 4 + col, *idx);
            }
        }
    }

    #[test]
    fn nms_basic_cases() {
        assert!(nms(&[], 0.5).is_empty());
        let b = bx(0.5, 0.5, 0.2, 0.2);
        let hi = Detection {
            confidence: 0.9,
            ..Detection::certain(b, 1)
        };
        let lo = Detection {
            confidence: 0.8,
            ..Detection::certain(b, 1)
        };
        let kept = nms(&[lo, hi], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].confidence, 0.9);
        // other class is not suppressed
        let other = Detection {
            confidence: 0.7,
            ..Detection::certain(b, 2)
        };
        assert_eq!(nms(&[lo, hi, other], 0.5).len(), 2);
    }

    /// Reference O(n^2) suppression: a detection survives iff no
    /// higher-ranked survivor of its class overlaps it.
    fn reference_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
        let mut alive = vec![true; dets.len()];
        for (rank, &i) in order.iter().enumerate() {
            if !alive[i] {
                continue;
            }
            for &j in &order[rank + 1..] {
                if dets[j].class_id == dets[i].class_id && iou(&dets[i].bbox, &dets[j].bbox) > thr {
                    alive[j] = false;
                }
            }
        }
        order.into_iter().filter(|&i| alive[i]).map(|i| dets[i]).collect()
    }

    fn random_dets(rng: &mut ChaCha8Rng, n: usize) -> Vec<Detection> {
        (0..n)
            .map(|_| Detection {
                bbox: bx(
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.05..0.4),
                    rng.random_range(0.05..0.4),
                ),
                class_id: rng.random_range(0..2),
                confidence: rng.random_range(0.0..1.0),
                objectness: 1.0,
                class_prob: 1.0,
            })
            .collect()
    }

    #[test]
    fn nms_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let dets = random_dets(&mut rng, 20);
            assert_eq!(nms(&dets, 0.45), reference_nms(&dets, 0.45));
        }
    }

    #[test]
    fn partition_extremes_and_mixed() {
        let shape = GridShape::new(3, 2).unwrap();
        let mut t = DetectionTensor::zeros(shape);
        for i in 0..shape.cells() {
            t.cell_mut(i)[0] = -10.0;
        }
        let (h, e) = partition_cells(&t, 0.5);
        assert_eq!(h.count(), 0);
        assert_eq!(e.count(), 9);
        for i in 0..shape.cells() {
            t.cell_mut(i)[0] = 10.0;
        }
        let (h, e) = partition_cells(&t, 0.5);
        assert_eq!(h.count(), 9);
        assert_eq!(e.count(), 0);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..shape.cells() {
            t.cell_mut(i)[0] = rng.random_range(-3.0..3.0);
        }
        let (h, _) = partition_cells(&t, 0.7);
        for i in 0..shape.cells() {
            let p = 1.0 / (1.0 + (-t.cell(i)[0]).exp());
            assert_eq!(h.contains(i), p >= 0.7);
        }
    }

    #[test]
    fn tensor_rejects_bad_values() {
        let shape = GridShape::new(2, 1).unwrap();
        assert!(DetectionTensor::from_values(shape, vec![0.0; 3]).is_err());
        let mut v = vec![0.0; shape.len()];
        v[4] = f64::INFINITY;
        assert!(DetectionTensor::from_values(shape, v).is_err());
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.0..1.0f64, 0.0..1.0f64, 0.001..1.0f64, 0.001..1.0f64)
            .prop_map(|(cx, cy, w, h)| BoundingBox::new(cx, cy, w, h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert!((ab - iou(&b, &a)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
            prop_assert!(a.intersection(&b) <= a.area().min(b.area()) + 1e-15);
        }

        #[test]
        fn saturated_roundtrip_centers(cx in 0.01..0.99f64, cy in 0.01..0.99f64,
                                       w in 0.05..0.9f64, h in 0.05..0.9f64) {
            let shape = GridShape::new(8, 2).unwrap();
            let mut t = DetectionTensor::zeros(shape);
            for i in 0..shape.cells() {
                t.cell_mut(i)[0] = -20.0;
            }
            let b = BoundingBox::new(cx, cy, w, h).unwrap();
            let (row, col) = t.encode_box(&b);
            t.set(row, col, 0, 20.0);
            t.set(row, col, 5, 20.0);
            let dets = decode_tensor(&t, 0.5);
            prop_assert_eq!(dets.len(), 1);
            prop_assert!((dets[0].bbox.cx - cx).abs() < 1e-6);
            prop_assert!((dets[0].bbox.cy - cy).abs() < 1e-6);
        }

        #[test]
        fn nms_survivors_are_subset_and_separated(seed in any::<u64>(), thr in 0.1..0.9f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dets = random_dets(&mut rng, 15);
            let kept = nms(&dets, thr);
            for k in &kept {
                prop_assert!(dets.contains(k));
            }
            for (i, a) in kept.iter().enumerate() {
                for b in &kept[i + 1..] {
                    if a.class_id == b.class_id {
                        prop_assert!(iou(&a.bbox, &b.bbox) <= thr);
                    }
                }
            }
        }

        #[test]
        fn partition_disjoint_and_exhaustive(seed in any::<u64>(), theta in 0.01..0.99f64) {
            let shape = GridShape::new(5, 2).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vals = (0..shape.len()).map(|_| rng.random_range(-5.0..5.0)).collect();
            let t = DetectionTensor::from_values(shape, vals).unwrap();
            let (h, e) = partition_cells(&t, theta);
            for i in 0..shape.cells() {
                prop_assert!(h.contains(i) ^ e.contains(i));
            }
        }
    }
}
