//! Detection-domain geometry and set logic: boxes, IoU, score thresholding,
//! NMS, candidate sets and TP/FP matching against ground truth.
//!
//! All operations here are pure functions of immutable inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned bounding box in pixel coordinates, stored in corner form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BoundingBox { x_min, y_min, x_max, y_max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let coords = [self.x_min, self.y_min, self.x_max, self.y_max];
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::validation(format!("non-finite box coordinates {coords:?}")));
        }
        if self.x_min > self.x_max || self.y_min > self.y_max {
            return Err(Error::validation(format!(
                "inverted box: ({}, {}, {}, {})",
                self.x_min, self.y_min, self.x_max, self.y_max
            )));
        }
        Ok(())
    }

    /// Center/size form `(cx, cy, w, h)`; lossless partner of [`BoundingBox::from_center`].
    pub fn center(&self) -> (f64, f64, f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
            self.x_max - self.x_min,
            self.y_max - self.y_min,
        )
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BoundingBox {
            x_min: cx - 0.5 * w,
            y_min: cy - 0.5 * h,
            x_max: cx + 0.5 * w,
            y_max: cy + 0.5 * h,
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Clamp the box into `[0, w] x [0, h]`.
    pub fn clip(&self, w: f64, h: f64) -> Self {
        let x_min = self.x_min.clamp(0.0, w);
        let x_max = self.x_max.clamp(0.0, w);
        let y_min = self.y_min.clamp(0.0, h);
        let y_max = self.y_max.clamp(0.0, h);
        BoundingBox { x_min, y_min, x_max, y_max }
    }
}

/// Intersection over union of two boxes.
///
/// Degenerate cases (zero union area, e.g. two zero-area boxes) return 0
/// so the ratio is always defined.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

/// One scored output box of a detector head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub bbox: BoundingBox,
    /// Objectness/confidence score in (0,1).
    pub score: f64,
    /// Per-class probabilities in (0,1); sigmoid heads need not sum to 1.
    pub class_probs: Vec<f64>,
    /// Predicted category, 1-based; argmax of `class_probs` with ties
    /// broken by the lowest index.
    pub class_id: usize,
    pub anchor_index: usize,
    /// Raw head outputs for this anchor, when available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_outputs: Option<Vec<f64>>,
}

impl Instance {
    pub fn validate(&self) -> Result<()> {
        self.bbox.validate()?;
        if !self.score.is_finite() || self.score <= 0.0 || self.score >= 1.0 {
            return Err(Error::validation(format!(
                "score {} outside (0,1) at anchor {}",
                self.score, self.anchor_index
            )));
        }
        if self.class_probs.is_empty() {
            return Err(Error::validation("empty class_probs"));
        }
        for (i, p) in self.class_probs.iter().enumerate() {
            if !p.is_finite() || *p <= 0.0 || *p >= 1.0 {
                return Err(Error::validation(format!(
                    "class_probs[{i}] = {p} outside (0,1) at anchor {}",
                    self.anchor_index
                )));
            }
        }
        let expected = argmax_lowest(&self.class_probs) + 1;
        if self.class_id != expected {
            return Err(Error::validation(format!(
                "class_id {} is not argmax(class_probs) = {} at anchor {}",
                self.class_id, expected, self.anchor_index
            )));
        }
        if let Some(raw) = &self.raw_outputs {
            if raw.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(format!(
                    "non-finite raw_outputs at anchor {}",
                    self.anchor_index
                )));
            }
        }
        Ok(())
    }
}

/// Index of the maximum entry, ties broken by the lowest index.
pub(crate) fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Annotated object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub bbox: BoundingBox,
    pub class_id: usize,
}

/// All predictions and annotations of one image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageSample {
    pub image_id: String,
    pub image_width: f64,
    pub image_height: f64,
    pub predictions: Vec<Instance>,
    pub ground_truth: Vec<GroundTruthObject>,
}

impl ImageSample {
    /// Validate all fields and clip every box into the image bounds.
    pub fn validate_and_clip(&mut self) -> Result<()> {
        if !(self.image_width > 0.0 && self.image_height > 0.0) {
            return Err(Error::validation(format!(
                "image {}: non-positive dimensions",
                self.image_id
            )));
        }
        for p in &mut self.predictions {
            p.validate()?;
            p.bbox = p.bbox.clip(self.image_width, self.image_height);
        }
        for g in &mut self.ground_truth {
            g.bbox.validate()?;
            if g.class_id == 0 {
                return Err(Error::validation(format!(
                    "image {}: ground-truth class_id must be >= 1",
                    self.image_id
                )));
            }
            g.bbox = g.bbox.clip(self.image_width, self.image_height);
        }
        Ok(())
    }
}

/// Keep exactly the instances with `score >= eps_s`, preserving order.
pub fn score_threshold(instances: &[Instance], eps_s: f64) -> Vec<Instance> {
    instances.iter().filter(|i| i.score >= eps_s).cloned().collect()
}

/// Widely adopted IoU threshold for candidate sets and NMS.
pub const DEFAULT_EPS_IOU: f64 = 0.5;

/// Indices of all pool members that are candidate boxes for `target`:
/// score at least `eps_s`, identical class, and IoU with `target` at least
/// `eps_iou`. `target` itself qualifies whenever it is in the pool and
/// passes the score cut (self-IoU is 1).
pub fn candidate_set(
    target: &Instance,
    pool: &[Instance],
    eps_s: f64,
    eps_iou: f64,
) -> Vec<usize> {
    pool.iter()
        .enumerate()
        .filter(|(_, i)| {
            i.score >= eps_s
                && i.class_id == target.class_id
                && iou(&i.bbox, &target.bbox) >= eps_iou
        })
        .map(|(idx, _)| idx)
        .collect()
}

/// Greedy non-maximum suppression, returning indices of survivors in
/// descending score order.
///
/// Repeatedly selects the highest-score remaining box with score >= `eps_s`
/// (ties broken by lower anchor index, then lower list position), emits it,
/// and deletes its candidates. Terminates when no box above the score
/// threshold remains.
pub fn nms_indices(instances: &[Instance], eps_s: f64, eps_iou: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..instances.len())
        .filter(|&i| instances[i].score >= eps_s)
        .collect();
    order.sort_by(|&a, &b| {
        instances[b]
            .score
            .partial_cmp(&instances[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(instances[a].anchor_index.cmp(&instances[b].anchor_index))
            .then(a.cmp(&b))
    });

    let mut keep = Vec::new();
    let mut removed = vec![false; instances.len()];
    for &i in &order {
        if removed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order {
            if removed[j] || j == i {
                continue;
            }
            if instances[j].class_id == instances[i].class_id
                && iou(&instances[j].bbox, &instances[i].bbox) >= eps_iou
            {
                removed[j] = true;
            }
        }
    }
    keep
}

/// [`nms_indices`] materialized as owned instances.
pub fn nms(instances: &[Instance], eps_s: f64, eps_iou: f64) -> Vec<Instance> {
    nms_indices(instances, eps_s, eps_iou)
        .into_iter()
        .map(|i| instances[i].clone())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TpFpLabel {
    Tp,
    Fp,
}

/// Outcome of matching one prediction against the ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchOutcome {
    /// Index into the prediction list that was matched.
    pub pred_index: usize,
    pub label: TpFpLabel,
    /// Maximum IoU with any same-class ground-truth object (0 if none);
    /// the meta-regression target.
    pub matched_iou: f64,
}

/// VOC-style greedy TP/FP matching of post-NMS predictions.
///
/// Predictions are visited in descending score order (ties broken by lower
/// anchor index, then list position). A prediction is TP iff it claims an
/// unclaimed same-class ground-truth object with IoU >= `iou_threshold`;
/// claiming is one-to-one and prefers the highest-IoU unclaimed object.
/// The reported `matched_iou` is independent of claiming.
pub fn match_tp_fp(sample: &ImageSample, iou_threshold: f64) -> Vec<MatchOutcome> {
    let preds = &sample.predictions;
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .score
            .partial_cmp(&preds[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(preds[a].anchor_index.cmp(&preds[b].anchor_index))
            .then(a.cmp(&b))
    });

    let mut claimed = vec![false; sample.ground_truth.len()];
    let mut outcomes = vec![
        MatchOutcome { pred_index: 0, label: TpFpLabel::Fp, matched_iou: 0.0 };
        preds.len()
    ];
    for &pi in &order {
        let pred = &preds[pi];
        let mut max_iou = 0.0f64;
        let mut best_unclaimed: Option<(usize, f64)> = None;
        for (gi, gt) in sample.ground_truth.iter().enumerate() {
            if gt.class_id != pred.class_id {
                continue;
            }
            let v = iou(&pred.bbox, &gt.bbox);
            max_iou = max_iou.max(v);
            if !claimed[gi] && v >= iou_threshold {
                match best_unclaimed {
                    Some((_, best)) if best >= v => {}
                    _ => best_unclaimed = Some((gi, v)),
                }
            }
        }
        let label = if let Some((gi, _)) = best_unclaimed {
            claimed[gi] = true;
            TpFpLabel::Tp
        } else {
            TpFpLabel::Fp
        };
        outcomes[pi] = MatchOutcome { pred_index: pi, label, matched_iou: max_iou };
    }
    outcomes
}

#[cfg(test)]
mod tests {
    use super::*;

    fn boxed(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    pub(crate) fn instance(
        bbox: BoundingBox,
        score: f64,
        class_id: usize,
        anchor_index: usize,
    ) -> Instance {
        // two-class prob vector consistent with class_id
        let mut probs = vec![0.2, 0.1];
        probs[class_id - 1] = 0.8;
        Instance { bbox, score, class_probs: probs, class_id, anchor_index, raw_outputs: None }
    }

    #[test]
    fn iou_identical_boxes() {
        let a = boxed(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn iou_disjoint_boxes() {
        let a = boxed(0.0, 0.0, 1.0, 1.0);
        let b = boxed(5.0, 5.0, 6.0, 6.0);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_partial_overlap_matches_rasterization_oracle() {
        // overlap 1x2 of a 2x2 and a shifted 2x2: IoU = 2 / 6 = 1/3
        let a = boxed(0.0, 0.0, 2.0, 2.0);
        let b = boxed(1.0, 0.0, 3.0, 2.0);
        let expect = rasterization_iou(&a, &b, 1024);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        assert!((iou(&a, &b) - expect).abs() < 1e-3);
    }

    #[test]
    fn iou_degenerate_is_zero() {
        let a = boxed(1.0, 1.0, 1.0, 1.0);
        assert_eq!(iou(&a, &a), 0.0);
    }

    /// Fine-grid oracle: count covered cells over the union's bounding box.
    pub(crate) fn rasterization_iou(a: &BoundingBox, b: &BoundingBox, grid: usize) -> f64 {
        let x0 = a.x_min.min(b.x_min);
        let y0 = a.y_min.min(b.y_min);
        let x1 = a.x_max.max(b.x_max);
        let y1 = a.y_max.max(b.y_max);
        let dx = (x1 - x0) / grid as f64;
        let dy = (y1 - y0) / grid as f64;
        if dx == 0.0 || dy == 0.0 {
            return 0.0;
        }
        let mut inter = 0u64;
        let mut union = 0u64;
        for i in 0..grid {
            let cy = y0 + (i as f64 + 0.5) * dy;
            let in_ay = cy >= a.y_min && cy <= a.y_max;
            let in_by = cy >= b.y_min && cy <= b.y_max;
            if !in_ay && !in_by {
                continue;
            }
            for j in 0..grid {
                let cx = x0 + (j as f64 + 0.5) * dx;
                let in_a = in_ay && cx >= a.x_min && cx <= a.x_max;
                let in_b = in_by && cx >= b.x_min && cx <= b.x_max;
                if in_a && in_b {
                    inter += 1;
                }
                if in_a || in_b {
                    union += 1;
                }
            }
        }
        if union == 0 {
            return 0.0;
        }
        inter as f64 / union as f64
    }

    #[test]
    fn score_threshold_zero_is_identity() {
        let xs = vec![
            instance(boxed(0.0, 0.0, 1.0, 1.0), 0.1, 1, 0),
            instance(boxed(0.0, 0.0, 1.0, 1.0), 0.5, 1, 1),
        ];
        assert_eq!(score_threshold(&xs, 0.0), xs);
    }

    #[test]
    fn score_threshold_boundary_inclusive() {
        let xs = vec![
            instance(boxed(0.0, 0.0, 1.0, 1.0), 0.1, 1, 0),
            instance(boxed(0.0, 0.0, 1.0, 1.0), 0.5, 1, 1),
            instance(boxed(0.0, 0.0, 1.0, 1.0), 0.9, 1, 2),
        ];
        let kept = score_threshold(&xs, 0.5);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].score, 0.5);
        assert_eq!(kept[1].score, 0.9);
    }

    #[test]
    fn candidate_set_contains_self() {
        let j = instance(boxed(0.0, 0.0, 2.0, 2.0), 0.7, 1, 0);
        let pool = vec![j.clone()];
        assert_eq!(candidate_set(&j, &pool, 0.5, 0.5), vec![0]);
    }

    #[test]
    fn candidate_set_excludes_low_iou() {
        let j = instance(boxed(0.0, 0.0, 2.0, 2.0), 0.7, 1, 0);
        // IoU = 1x2 / (4+4-2) = 1/3 < 0.4 threshold check at 0.5
        let other = instance(boxed(1.0, 0.0, 3.0, 2.0), 0.9, 1, 1);
        let pool = vec![j.clone(), other];
        assert_eq!(candidate_set(&j, &pool, 0.0, 0.5), vec![0]);
    }

    #[test]
    fn nms_suppresses_perfect_overlap() {
        let a = instance(boxed(0.0, 0.0, 2.0, 2.0), 0.9, 1, 0);
        let b = instance(boxed(0.0, 0.0, 2.0, 2.0), 0.8, 1, 1);
        let out = nms(&[a, b], 0.0, 0.5);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.9);
    }

    #[test]
    fn nms_keeps_disjoint_boxes() {
        let a = instance(boxed(0.0, 0.0, 2.0, 2.0), 0.9, 1, 0);
        let b = instance(boxed(5.0, 5.0, 7.0, 7.0), 0.8, 1, 1);
        assert_eq!(nms(&[a, b], 0.0, 0.5).len(), 2);
    }

    #[test]
    fn match_empty_ground_truth_is_all_fp() {
        let sample = ImageSample {
            image_id: "x".into(),
            image_width: 10.0,
            image_height: 10.0,
            predictions: vec![instance(boxed(0.0, 0.0, 2.0, 2.0), 0.9, 1, 0)],
            ground_truth: vec![],
        };
        let m = match_tp_fp(&sample, 0.5);
        assert_eq!(m[0].label, TpFpLabel::Fp);
        assert_eq!(m[0].matched_iou, 0.0);
    }

    #[test]
    fn match_exact_box_is_tp() {
        let sample = ImageSample {
            image_id: "x".into(),
            image_width: 10.0,
            image_height: 10.0,
            predictions: vec![instance(boxed(1.0, 1.0, 3.0, 3.0), 0.9, 1, 0)],
            ground_truth: vec![GroundTruthObject { bbox: boxed(1.0, 1.0, 3.0, 3.0), class_id: 1 }],
        };
        let m = match_tp_fp(&sample, 0.5);
        assert_eq!(m[0].label, TpFpLabel::Tp);
        assert_eq!(m[0].matched_iou, 1.0);
    }
}
