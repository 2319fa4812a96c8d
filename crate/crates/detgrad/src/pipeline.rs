//! End-to-end decision pipelines: NMS followed by thresholding on either
//! the detector score (baseline) or the meta-classifier probability
//! (fusion), evaluated by mean average precision and FP/FN sweeps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::detection::{iou, nms_indices, BoundingBox, ImageSample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineMode {
    Baseline,
    MetaFusion,
}

impl PipelineMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(PipelineMode::Baseline),
            "metafusion" => Ok(PipelineMode::MetaFusion),
            other => Err(Error::validation(format!("unknown pipeline mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PipelineConfig {
    /// Score pre-filter applied inside NMS.
    pub nms_eps_s: f64,
    pub nms_eps_iou: f64,
    /// IoU threshold of the TP/FP matching used for mAP and FP/FN counts.
    pub match_iou: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig { nms_eps_s: 1e-4, nms_eps_iou: 0.5, match_iou: 0.5 }
    }
}

/// One box surviving NMS, carrying the quantity the pipeline thresholds and
/// ranks by (score in baseline mode, meta probability in fusion mode).
#[derive(Debug, Clone)]
pub struct ScoredBox {
    pub image_index: usize,
    pub box_index: usize,
    pub class_id: usize,
    pub bbox: BoundingBox,
    pub confidence: f64,
}

/// Meta probabilities keyed by `(image_id, box_index)`.
pub type MetaProbs = BTreeMap<(String, usize), f64>;

/// NMS survivors of every image with their decision confidences; thresholding
/// is a cheap filter on top of this.
pub fn decision_boxes(
    mode: PipelineMode,
    samples: &[ImageSample],
    meta_probs: Option<&MetaProbs>,
    cfg: &PipelineConfig,
) -> Result<Vec<ScoredBox>> {
    if mode == PipelineMode::MetaFusion && meta_probs.is_none() {
        return Err(Error::validation("metafusion mode requires a trained meta classifier"));
    }
    let mut out = Vec::new();
    for (si, sample) in samples.iter().enumerate() {
        for idx in nms_indices(&sample.predictions, cfg.nms_eps_s, cfg.nms_eps_iou) {
            let inst = &sample.predictions[idx];
            let confidence = match mode {
                PipelineMode::Baseline => inst.score,
                PipelineMode::MetaFusion => {
                    let key = (sample.image_id.clone(), idx);
                    *meta_probs.unwrap().get(&key).ok_or_else(|| {
                        Error::validation(format!(
                            "no meta probability for box ({}, {idx})",
                            sample.image_id
                        ))
                    })?
                }
            };
            out.push(ScoredBox {
                image_index: si,
                box_index: idx,
                class_id: inst.class_id,
                bbox: inst.bbox,
                confidence,
            });
        }
    }
    Ok(out)
}

/// Post-NMS boxes with decision confidence at least `threshold`.
pub fn run_pipeline(
    mode: PipelineMode,
    samples: &[ImageSample],
    meta_probs: Option<&MetaProbs>,
    threshold: f64,
    cfg: &PipelineConfig,
) -> Result<Vec<ScoredBox>> {
    let boxes = decision_boxes(mode, samples, meta_probs, cfg)?;
    Ok(boxes.into_iter().filter(|b| b.confidence >= threshold).collect())
}

/// Mean average precision over classes with at least one annotation:
/// per-class all-point interpolated area under the precision-recall curve
/// from greedy IoU matching in descending confidence order.
pub fn mean_average_precision(
    detections: &[ScoredBox],
    samples: &[ImageSample],
    match_iou: f64,
) -> Result<f64> {
    let mut classes: Vec<usize> = samples
        .iter()
        .flat_map(|s| s.ground_truth.iter().map(|g| g.class_id))
        .collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return Err(Error::validation("mAP undefined without ground-truth objects"));
    }
    let mut ap_sum = 0.0;
    for &class in &classes {
        ap_sum += average_precision_for_class(detections, samples, class, match_iou);
    }
    Ok(ap_sum / classes.len() as f64)
}

fn average_precision_for_class(
    detections: &[ScoredBox],
    samples: &[ImageSample],
    class: usize,
    match_iou: f64,
) -> f64 {
    let n_gt: usize = samples
        .iter()
        .map(|s| s.ground_truth.iter().filter(|g| g.class_id == class).count())
        .sum();
    if n_gt == 0 {
        return 0.0;
    }
    let mut dets: Vec<&ScoredBox> = detections.iter().filter(|d| d.class_id == class).collect();
    dets.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.image_index.cmp(&b.image_index))
            .then(a.box_index.cmp(&b.box_index))
    });
    let mut claimed: Vec<Vec<bool>> = samples
        .iter()
        .map(|s| vec![false; s.ground_truth.len()])
        .collect();
    let mut tps = Vec::with_capacity(dets.len());
    for d in &dets {
        let gt = &samples[d.image_index].ground_truth;
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gt.iter().enumerate() {
            if g.class_id != class || claimed[d.image_index][gi] {
                continue;
            }
            let v = iou(&d.bbox, &g.bbox);
            if v >= match_iou {
                match best {
                    Some((_, bv)) if bv >= v => {}
                    _ => best = Some((gi, v)),
                }
            }
        }
        if let Some((gi, _)) = best {
            claimed[d.image_index][gi] = true;
            tps.push(true);
        } else {
            tps.push(false);
        }
    }
    // all-point interpolation: precision envelope from the right
    let mut precisions = Vec::with_capacity(tps.len());
    let mut recalls = Vec::with_capacity(tps.len());
    let mut tp = 0usize;
    for (k, &is_tp) in tps.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        precisions.push(tp as f64 / (k + 1) as f64);
        recalls.push(tp as f64 / n_gt as f64);
    }
    let mut envelope = precisions.clone();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..recalls.len() {
        if recalls[k] > prev_recall {
            ap += (recalls[k] - prev_recall) * envelope[k];
            prev_recall = recalls[k];
        }
    }
    ap
}

/// FP and FN counts of one class under one-to-one greedy matching of the
/// thresholded detections against the annotations.
pub fn fp_fn_counts(
    detections: &[ScoredBox],
    samples: &[ImageSample],
    class: usize,
    match_iou: f64,
) -> (u64, u64) {
    let mut dets: Vec<&ScoredBox> = detections.iter().filter(|d| d.class_id == class).collect();
    dets.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.image_index.cmp(&b.image_index))
            .then(a.box_index.cmp(&b.box_index))
    });
    let mut claimed: Vec<Vec<bool>> =
        samples.iter().map(|s| vec![false; s.ground_truth.len()]).collect();
    let mut fp = 0u64;
    for d in &dets {
        let gt = &samples[d.image_index].ground_truth;
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gt.iter().enumerate() {
            if g.class_id != class || claimed[d.image_index][gi] {
                continue;
            }
            let v = iou(&d.bbox, &g.bbox);
            if v >= match_iou {
                match best {
                    Some((_, bv)) if bv >= v => {}
                    _ => best = Some((gi, v)),
                }
            }
        }
        match best {
            Some((gi, _)) => claimed[d.image_index][gi] = true,
            None => fp += 1,
        }
    }
    let matched: u64 = claimed
        .iter()
        .map(|c| c.iter().filter(|&&x| x).count() as u64)
        .sum();
    let n_gt: u64 = samples
        .iter()
        .map(|s| s.ground_truth.iter().filter(|g| g.class_id == class).count() as u64)
        .sum();
    (fp, n_gt - matched)
}

/// One sweep evaluation point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub map: Option<f64>,
    pub false_positives: Option<u64>,
    pub false_negatives: Option<u64>,
}

/// Per-threshold evaluation of one decision source.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub source: String,
    pub points: Vec<SweepPoint>,
}

fn check_grid(thresholds: &[f64]) -> Result<()> {
    if thresholds.is_empty() {
        return Err(Error::validation("empty threshold grid"));
    }
    if thresholds.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::validation("threshold grid must be strictly increasing"));
    }
    Ok(())
}

/// mAP of the pipeline at every threshold of the grid.
pub fn map_sweep(
    mode: PipelineMode,
    source_name: &str,
    samples: &[ImageSample],
    meta_probs: Option<&MetaProbs>,
    thresholds: &[f64],
    cfg: &PipelineConfig,
) -> Result<SweepResult> {
    check_grid(thresholds)?;
    let all = decision_boxes(mode, samples, meta_probs, cfg)?;
    let mut points = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let kept: Vec<ScoredBox> =
            all.iter().filter(|b| b.confidence >= t).cloned().collect();
        let map = mean_average_precision(&kept, samples, cfg.match_iou)?;
        points.push(SweepPoint {
            threshold: t,
            map: Some(map),
            false_positives: None,
            false_negatives: None,
        });
    }
    Ok(SweepResult { source: source_name.to_string(), points })
}

/// FP/FN counts for one designated class at every threshold of the grid.
///
/// Greedy claims cascade strictly down the confidence ranking, so the match
/// of each box is independent of lower-ranked boxes; thresholding therefore
/// reduces to prefix counting over one full matching pass, which equals
/// [`fp_fn_counts`] of the thresholded set at every grid point.
pub fn fpfn_sweep(
    mode: PipelineMode,
    source_name: &str,
    samples: &[ImageSample],
    meta_probs: Option<&MetaProbs>,
    class: usize,
    thresholds: &[f64],
    cfg: &PipelineConfig,
) -> Result<SweepResult> {
    check_grid(thresholds)?;
    let all = decision_boxes(mode, samples, meta_probs, cfg)?;
    let mut dets: Vec<&ScoredBox> = all.iter().filter(|d| d.class_id == class).collect();
    dets.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.image_index.cmp(&b.image_index))
            .then(a.box_index.cmp(&b.box_index))
    });
    let mut claimed: Vec<Vec<bool>> =
        samples.iter().map(|s| vec![false; s.ground_truth.len()]).collect();
    let mut fp_prefix = Vec::with_capacity(dets.len() + 1);
    let mut tp_prefix = Vec::with_capacity(dets.len() + 1);
    fp_prefix.push(0u64);
    tp_prefix.push(0u64);
    for d in &dets {
        let gt = &samples[d.image_index].ground_truth;
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gt.iter().enumerate() {
            if g.class_id != class || claimed[d.image_index][gi] {
                continue;
            }
            let v = iou(&d.bbox, &g.bbox);
            if v >= cfg.match_iou {
                match best {
                    Some((_, bv)) if bv >= v => {}
                    _ => best = Some((gi, v)),
                }
            }
        }
        let (fp, tp) = match best {
            Some((gi, _)) => {
                claimed[d.image_index][gi] = true;
                (0, 1)
            }
            None => (1, 0),
        };
        fp_prefix.push(fp_prefix.last().unwrap() + fp);
        tp_prefix.push(tp_prefix.last().unwrap() + tp);
    }
    let n_gt: u64 = samples
        .iter()
        .map(|s| s.ground_truth.iter().filter(|g| g.class_id == class).count() as u64)
        .sum();
    let confs: Vec<f64> = dets.iter().map(|d| d.confidence).collect();
    let mut points = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let k = confs.partition_point(|&c| c >= t);
        points.push(SweepPoint {
            threshold: t,
            map: None,
            false_positives: Some(fp_prefix[k]),
            false_negatives: Some(n_gt - tp_prefix[k]),
        });
    }
    Ok(SweepResult { source: source_name.to_string(), points })
}

/// The default mAP grid: 0 to 1 in steps of 0.025.
pub fn default_map_grid() -> Vec<f64> {
    (0..=40).map(|i| i as f64 * 0.025).collect()
}

/// The default FP/FN grid: 0 to 1 in steps of 1e-4, capped at 10001 points.
pub fn default_fpfn_grid() -> Vec<f64> {
    (0..=10_000).map(|i| i as f64 * 1e-4).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::{score_threshold, GroundTruthObject, Instance};
    use crate::synth::{generate_synthetic_corpus, SyntheticCorpusConfig};

    fn tiny_corpus(seed: u64, n: usize) -> Vec<ImageSample> {
        let cfg = SyntheticCorpusConfig { n_images: n, seed, ..Default::default() };
        generate_synthetic_corpus(&cfg).unwrap().0
    }

    #[test]
    fn baseline_equals_threshold_after_nms_composition() {
        let samples = tiny_corpus(3, 8);
        let cfg = PipelineConfig::default();
        for &t in &[0.0, 0.3, 0.7] {
            let got = run_pipeline(PipelineMode::Baseline, &samples, None, t, &cfg).unwrap();
            let mut want = Vec::new();
            for s in &samples {
                let survivors = crate::detection::nms(&s.predictions, cfg.nms_eps_s, cfg.nms_eps_iou);
                want.extend(score_threshold(&survivors, t));
            }
            assert_eq!(got.len(), want.len());
            let got_scores: Vec<f64> = got.iter().map(|b| b.confidence).collect();
            let want_scores: Vec<f64> = want.iter().map(|i| i.score).collect();
            assert_eq!(got_scores, want_scores);
        }
    }

    #[test]
    fn both_modes_agree_at_threshold_zero() {
        let samples = tiny_corpus(4, 6);
        let cfg = PipelineConfig::default();
        // constant meta probabilities, any value
        let mut probs = MetaProbs::new();
        for s in &samples {
            for i in 0..s.predictions.len() {
                probs.insert((s.image_id.clone(), i), 0.5);
            }
        }
        let a = run_pipeline(PipelineMode::Baseline, &samples, None, 0.0, &cfg).unwrap();
        let b =
            run_pipeline(PipelineMode::MetaFusion, &samples, Some(&probs), 0.0, &cfg).unwrap();
        let ka: Vec<(usize, usize)> = a.iter().map(|x| (x.image_index, x.box_index)).collect();
        let kb: Vec<(usize, usize)> = b.iter().map(|x| (x.image_index, x.box_index)).collect();
        assert_eq!(ka, kb);
    }

    #[test]
    fn threshold_one_keeps_almost_nothing() {
        let samples = tiny_corpus(5, 6);
        let cfg = PipelineConfig::default();
        let kept = run_pipeline(PipelineMode::Baseline, &samples, None, 1.0, &cfg).unwrap();
        assert!(kept.iter().all(|b| b.confidence >= 1.0));
        assert!(kept.is_empty()); // scores are strictly inside (0,1)
    }

    #[test]
    fn missing_model_is_rejected() {
        let samples = tiny_corpus(6, 2);
        let cfg = PipelineConfig::default();
        assert!(run_pipeline(PipelineMode::MetaFusion, &samples, None, 0.5, &cfg).is_err());
    }

    #[test]
    fn perfect_predictions_reach_map_one_and_none_reach_zero() {
        let mut samples = tiny_corpus(7, 4);
        // replace predictions with exact copies of the ground truth
        for s in &mut samples {
            s.predictions = s
                .ground_truth
                .iter()
                .enumerate()
                .map(|(i, g)| Instance {
                    bbox: g.bbox,
                    score: 0.99,
                    class_probs: {
                        let mut p = vec![0.05; 3];
                        p[g.class_id - 1] = 0.95;
                        p
                    },
                    class_id: g.class_id,
                    anchor_index: i,
                    raw_outputs: None,
                })
                .collect();
        }
        let cfg = PipelineConfig::default();
        let dets = run_pipeline(PipelineMode::Baseline, &samples, None, 0.0, &cfg).unwrap();
        let map = mean_average_precision(&dets, &samples, 0.5).unwrap();
        assert!((map - 1.0).abs() < 1e-12);
        let empty: Vec<ScoredBox> = Vec::new();
        assert_eq!(mean_average_precision(&empty, &samples, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn map_matches_brute_force_threshold_enumeration() {
        let samples = tiny_corpus(8, 6);
        let cfg = PipelineConfig::default();
        let dets = run_pipeline(PipelineMode::Baseline, &samples, None, 0.0, &cfg).unwrap();
        let got = mean_average_precision(&dets, &samples, 0.5).unwrap();

        // independent evaluator: enumerate confidences as thresholds and
        // integrate the max-precision staircase per class
        let mut classes: Vec<usize> = samples
            .iter()
            .flat_map(|s| s.ground_truth.iter().map(|g| g.class_id))
            .collect();
        classes.sort_unstable();
        classes.dedup();
        let mut ap_sum = 0.0;
        for &class in &classes {
            let n_gt: usize = samples
                .iter()
                .map(|s| s.ground_truth.iter().filter(|g| g.class_id == class).count())
                .sum();
            let mut confs: Vec<f64> = dets
                .iter()
                .filter(|d| d.class_id == class)
                .map(|d| d.confidence)
                .collect();
            confs.sort_by(|a, b| b.partial_cmp(a).unwrap());
            confs.dedup();
            // precision/recall at each threshold via fp_fn_counts
            let mut pr: Vec<(f64, f64)> = Vec::new();
            for &t in &confs {
                let kept: Vec<ScoredBox> =
                    dets.iter().filter(|d| d.confidence >= t).cloned().collect();
                let (fp, fn_) = fp_fn_counts(&kept, &samples, class, 0.5);
                let tp = n_gt as f64 - fn_ as f64;
                let denom = tp + fp as f64;
                if denom == 0.0 {
                    continue;
                }
                pr.push((tp / n_gt as f64, tp / denom));
            }
            let mut ap = 0.0;
            let mut prev_r = 0.0;
            for (i, &(r, _)) in pr.iter().enumerate() {
                if r > prev_r {
                    let p_max =
                        pr[i..].iter().map(|&(_, p)| p).fold(f64::NEG_INFINITY, f64::max);
                    ap += (r - prev_r) * p_max;
                    prev_r = r;
                }
            }
            ap_sum += ap;
        }
        let want = ap_sum / classes.len() as f64;
        assert!((got - want).abs() < 1e-10, "got {got} want {want}");
    }

    #[test]
    fn sweep_monotonicity_and_zero_threshold_consistency() {
        let samples = tiny_corpus(9, 10);
        let cfg = PipelineConfig::default();
        let grid: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
        let sweep =
            fpfn_sweep(PipelineMode::Baseline, "score", &samples, None, 1, &grid, &cfg).unwrap();
        for w in sweep.points.windows(2) {
            assert!(w[1].false_positives.unwrap() <= w[0].false_positives.unwrap());
            assert!(w[1].false_negatives.unwrap() >= w[0].false_negatives.unwrap());
        }
        // the prefix-count sweep must equal the direct count at every
        // sampled threshold, including 0 (all post-NMS boxes kept)
        for (i, &t) in grid.iter().enumerate() {
            let dets = run_pipeline(PipelineMode::Baseline, &samples, None, t, &cfg).unwrap();
            let (fp, fn_) = fp_fn_counts(&dets, &samples, 1, 0.5);
            assert_eq!(sweep.points[i].false_positives.unwrap(), fp, "threshold {t}");
            assert_eq!(sweep.points[i].false_negatives.unwrap(), fn_, "threshold {t}");
        }
    }

    #[test]
    fn single_point_grid_equals_run_pipeline() {
        let samples = tiny_corpus(10, 5);
        let cfg = PipelineConfig::default();
        let sweep =
            map_sweep(PipelineMode::Baseline, "score", &samples, None, &[0.0], &cfg).unwrap();
        let dets = run_pipeline(PipelineMode::Baseline, &samples, None, 0.0, &cfg).unwrap();
        let map = mean_average_precision(&dets, &samples, 0.5).unwrap();
        assert_eq!(sweep.points.len(), 1);
        assert_eq!(sweep.points[0].map.unwrap(), map);
    }

    #[test]
    fn map_is_invariant_under_per_class_monotone_rescoring() {
        let samples = tiny_corpus(11, 6);
        let cfg = PipelineConfig::default();
        let dets = run_pipeline(PipelineMode::Baseline, &samples, None, 0.0, &cfg).unwrap();
        let base = mean_average_precision(&dets, &samples, 0.5).unwrap();
        // a different strictly monotone map per class
        let warped: Vec<ScoredBox> = dets
            .iter()
            .map(|d| {
                let c = d.confidence;
                let confidence = match d.class_id {
                    1 => c * c,
                    2 => c.sqrt(),
                    _ => (5.0 * c).tanh(),
                };
                ScoredBox { confidence, ..d.clone() }
            })
            .collect();
        let rescored = mean_average_precision(&warped, &samples, 0.5).unwrap();
        assert!((base - rescored).abs() < 1e-12, "{base} vs {rescored}");
    }

    #[test]
    fn zero_ground_truth_rejected_for_map() {
        let samples = vec![ImageSample {
            image_id: "x".into(),
            image_width: 10.0,
            image_height: 10.0,
            predictions: Vec::new(),
            ground_truth: Vec::new(),
        }];
        let _ = GroundTruthObject {
            bbox: crate::detection::BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
            class_id: 1,
        };
        assert!(mean_average_precision(&[], &samples, 0.5).is_err());
    }
}
