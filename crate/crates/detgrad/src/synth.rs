//! Synthetic corpora: a desk-scale substitute for trained detectors.
//!
//! Two kinds are generated. The *injected* corpus draws per-box feature
//! columns from class-conditional Gaussians whose separation is a config
//! knob and ties scores to the true box quality through a noisy monotone
//! map, so meta-model orderings are reproducible by construction. The
//! *physical* corpus runs a randomly initialized toy conv head on random
//! inputs, producing real raw outputs for the gradient and dropout paths.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conv::{DetectorHead, FeatureMap};
use crate::detection::{
    iou, match_tp_fp, nms_indices, BoundingBox, GroundTruthObject, ImageSample, Instance,
    TpFpLabel,
};
use crate::error::{Error, Result};
use crate::features::{gradient_columns, mc_columns, schema_id, FeatureRow, FeatureTable};
use crate::heads::{sigmoid, HeadKind};

/// Configuration of the injected-signal corpus.
#[derive(Debug, Clone)]
pub struct SyntheticCorpusConfig {
    pub n_images: usize,
    pub num_classes: usize,
    pub image_width: f64,
    pub image_height: f64,
    /// Inclusive range of annotated objects per image.
    pub objects_per_image: (usize, usize),
    /// Inclusive range of decoy (false-positive) boxes per image.
    pub decoys_per_image: (usize, usize),
    /// Probability that an object receives a nearby detection.
    pub detect_prob: f64,
    /// Total class-conditional separation of the gradient-feature block.
    pub signal_strength: f64,
    /// Separation of the MC-dropout feature block.
    pub mc_signal_strength: f64,
    /// Logit-scale Gaussian noise on the score.
    pub score_noise: f64,
    /// Logit-scale shift pushing scores high (miscalibration knob).
    pub score_shift: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        SyntheticCorpusConfig {
            n_images: 150,
            num_classes: 3,
            image_width: 128.0,
            image_height: 128.0,
            objects_per_image: (3, 6),
            decoys_per_image: (3, 7),
            detect_prob: 0.85,
            signal_strength: 3.5,
            mc_signal_strength: 2.5,
            score_noise: 2.2,
            score_shift: 1.6,
            seed: 0,
        }
    }
}

impl SyntheticCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_images == 0 {
            return Err(Error::validation("corpus needs at least one image"));
        }
        if self.num_classes == 0 {
            return Err(Error::validation("corpus needs at least one class"));
        }
        if self.objects_per_image.1 == 0 && self.decoys_per_image.1 == 0 {
            return Err(Error::validation(
                "degenerate corpus: zero objects and zero decoys per image",
            ));
        }
        if self.objects_per_image.0 > self.objects_per_image.1
            || self.decoys_per_image.0 > self.decoys_per_image.1
        {
            return Err(Error::validation("per-image count ranges must be ordered"));
        }
        if !(0.0..=1.0).contains(&self.detect_prob) {
            return Err(Error::validation("detect_prob must lie in [0,1]"));
        }
        Ok(())
    }

    /// Analytic AuROC of the Bayes-optimal classifier on the injected
    /// gradient block alone (a lower bound on what the full feature set
    /// supports): `Phi(delta / sqrt(2))` for total separation `delta`
    /// against unit-variance noise.
    pub fn bayes_auroc_gradient_block(&self) -> f64 {
        normal_cdf(self.signal_strength / std::f64::consts::SQRT_2)
    }
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Abramowitz-Stegun 7.1.26 rational approximation, |error| < 1.5e-7.
fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let y = 1.0
        - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t
            + 0.254829592)
            * t
            * (-x * x).exp();
    sign * y
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(1e-9, 1.0 - 1e-9)
}

/// Generate the injected-signal corpus: image samples with known TP/FP
/// structure plus a feature table whose gradient/MC columns carry
/// controllable mutual information with the box quality beyond the score.
pub fn generate_synthetic_corpus(
    cfg: &SyntheticCorpusConfig,
) -> Result<(Vec<ImageSample>, FeatureTable)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let grad_cols = gradient_columns(HeadKind::Yolo);
    let mc_cols = mc_columns();
    let n_grad = grad_cols.len();
    let n_mc = mc_cols.len();
    // per-column separation so the block totals are the config knobs
    let grad_sep = cfg.signal_strength / (n_grad as f64).sqrt();
    let mc_sep = cfg.mc_signal_strength / (n_mc as f64).sqrt();

    let mut samples = Vec::with_capacity(cfg.n_images);
    let mut rows = Vec::new();
    for img in 0..cfg.n_images {
        let image_id = format!("synth{img:05}");
        let n_obj = rng.random_range(cfg.objects_per_image.0..=cfg.objects_per_image.1);
        let n_decoy = rng.random_range(cfg.decoys_per_image.0..=cfg.decoys_per_image.1);

        let mut ground_truth = Vec::with_capacity(n_obj);
        for _ in 0..n_obj {
            let w = rng.random_range(10.0..30.0);
            let h = rng.random_range(10.0..30.0);
            let cx = rng.random_range(w / 2.0..cfg.image_width - w / 2.0);
            let cy = rng.random_range(h / 2.0..cfg.image_height - h / 2.0);
            ground_truth.push(GroundTruthObject {
                bbox: BoundingBox::from_center(cx, cy, w, h),
                class_id: rng.random_range(1..=cfg.num_classes),
            });
        }

        let mut predictions: Vec<Instance> = Vec::new();
        let push_box = |bbox: BoundingBox, class_id: usize, quality: f64, rng: &mut ChaCha8Rng, predictions: &mut Vec<Instance>| {
            let logit =
                3.0 * (quality - 0.5) + cfg.score_shift + cfg.score_noise * normal(rng);
            let score = clamp_prob(sigmoid(logit));
            let mut class_probs = vec![0.0; cfg.num_classes];
            for (m, p) in class_probs.iter_mut().enumerate() {
                *p = clamp_prob(0.08 + 0.015 * m as f64 + 0.02 * rng.random_range(0.0..1.0));
            }
            class_probs[class_id - 1] = clamp_prob(0.5 + 0.45 * score);
            let anchor_index = predictions.len();
            predictions.push(Instance {
                bbox: bbox.clip(cfg.image_width, cfg.image_height),
                score,
                class_probs,
                class_id,
                anchor_index,
                raw_outputs: None,
            });
        };

        for gt in &ground_truth {
            if rng.random_range(0.0..1.0) >= cfg.detect_prob {
                continue; // a false negative at every threshold
            }
            // a near-detection with controlled jitter, sometimes duplicated
            let n_dupes = if rng.random_range(0.0..1.0) < 0.35 { 2 } else { 1 };
            for _ in 0..n_dupes {
                let (cx, cy, w, h) = gt.bbox.center();
                let jx = rng.random_range(-0.12..0.12) * w;
                let jy = rng.random_range(-0.12..0.12) * h;
                let jw = w * rng.random_range(0.85..1.18);
                let jh = h * rng.random_range(0.85..1.18);
                let bbox = BoundingBox::from_center(cx + jx, cy + jy, jw, jh);
                let q = iou(&bbox, &gt.bbox);
                push_box(bbox, gt.class_id, q, &mut rng, &mut predictions);
            }
        }
        for _ in 0..n_decoy {
            let w = rng.random_range(8.0..30.0);
            let h = rng.random_range(8.0..30.0);
            let cx = rng.random_range(w / 2.0..cfg.image_width - w / 2.0);
            let cy = rng.random_range(h / 2.0..cfg.image_height - h / 2.0);
            let bbox = BoundingBox::from_center(cx, cy, w, h);
            let class_id = rng.random_range(1..=cfg.num_classes);
            let q = ground_truth
                .iter()
                .filter(|g| g.class_id == class_id)
                .map(|g| iou(&bbox, &g.bbox))
                .fold(0.0, f64::max);
            push_box(bbox, class_id, q, &mut rng, &mut predictions);
        }

        let sample = ImageSample {
            image_id: image_id.clone(),
            image_width: cfg.image_width,
            image_height: cfg.image_height,
            predictions,
            ground_truth,
        };

        // feature rows for post-NMS boxes, labeled by greedy matching
        let survivors = nms_indices(&sample.predictions, 1e-4, 0.5);
        let kept = ImageSample {
            predictions: survivors.iter().map(|&i| sample.predictions[i].clone()).collect(),
            ground_truth: sample.ground_truth.clone(),
            ..sample.clone()
        };
        let outcomes = match_tp_fp(&kept, 0.5);
        for (k, outcome) in outcomes.iter().enumerate() {
            let box_index = survivors[k];
            let label = match outcome.label {
                TpFpLabel::Tp => 1u8,
                TpFpLabel::Fp => 0u8,
            };
            let centered = label as f64 - 0.5;
            let quality = outcome.matched_iou;
            let mut values = Vec::with_capacity(n_grad + n_mc);
            for _ in 0..n_grad {
                values.push(
                    grad_sep * centered
                        + 0.35 * cfg.signal_strength / (n_grad as f64).sqrt() * (quality - 0.5)
                        + normal(&mut rng),
                );
            }
            for _ in 0..n_mc {
                values.push(
                    mc_sep * centered
                        + 0.35 * cfg.mc_signal_strength / (n_mc as f64).sqrt() * (quality - 0.5)
                        + normal(&mut rng),
                );
            }
            rows.push(FeatureRow {
                image_id: image_id.clone(),
                box_index,
                score: kept.predictions[k].score,
                label_tpfp: label,
                target_iou: quality,
                values,
            });
        }
        samples.push(sample);
    }

    let columns: Vec<String> = grad_cols.into_iter().chain(mc_cols).collect();
    let table = FeatureTable {
        schema_id: schema_id(HeadKind::Yolo, true, true),
        columns,
        rows,
    };
    table.validate()?;
    Ok((samples, table))
}

/// Configuration of the physical corpus (real toy head, real raw outputs).
#[derive(Debug, Clone)]
pub struct PhysicalCorpusConfig {
    pub n_images: usize,
    pub head_kind: HeadKind,
    pub num_classes: usize,
    pub slots_per_cell: usize,
    pub gt_per_image: (usize, usize),
    pub seed: u64,
}

impl Default for PhysicalCorpusConfig {
    fn default() -> Self {
        PhysicalCorpusConfig {
            n_images: 12,
            head_kind: HeadKind::Yolo,
            num_classes: 3,
            slots_per_cell: 2,
            gt_per_image: (2, 4),
            seed: 0,
        }
    }
}

pub struct PhysicalCorpus {
    pub det: DetectorHead,
    pub inputs: Vec<(String, FeatureMap)>,
    pub samples: Vec<ImageSample>,
}

/// Build a random toy detector and run it on random inputs. Ground truth is
/// sampled near a few decoded boxes so true positives exist.
pub fn generate_physical_corpus(cfg: &PhysicalCorpusConfig) -> Result<PhysicalCorpus> {
    if cfg.n_images == 0 {
        return Err(Error::validation("corpus needs at least one image"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut det = DetectorHead::toy(cfg.head_kind, cfg.num_classes, cfg.slots_per_cell, &mut rng);
    // softened output layer keeps decoded boxes near their anchors
    if let Some(last) = det.conv.layers.last_mut() {
        for k in &mut last.kernels {
            *k *= 0.5;
        }
    }
    let (width, height) = (
        det.conv.width as f64 * det.grid.cell_size,
        det.conv.height as f64 * det.grid.cell_size,
    );
    let mut inputs = Vec::with_capacity(cfg.n_images);
    let mut samples = Vec::with_capacity(cfg.n_images);
    for img in 0..cfg.n_images {
        let image_id = format!("phys{img:05}");
        let input =
            FeatureMap::random(det.conv.layers[0].k_in, det.conv.height, det.conv.width, 1.0, &mut rng);
        let fwd = det.conv.forward(&input)?;
        let raw = det.extract_raw_outputs(fwd.output())?;
        let boxes = crate::heads::transform_outputs(&raw, &det.grid)?;

        let n_gt = rng.random_range(cfg.gt_per_image.0..=cfg.gt_per_image.1);
        let mut ground_truth = Vec::with_capacity(n_gt);
        for _ in 0..n_gt {
            let pick = rng.random_range(0..boxes.len());
            let b = &boxes[pick];
            let (cx, cy, w, h) = b.bbox.center();
            let bbox = BoundingBox::from_center(
                cx + rng.random_range(-0.05..0.05) * w,
                cy + rng.random_range(-0.05..0.05) * h,
                w * rng.random_range(0.92..1.1),
                h * rng.random_range(0.92..1.1),
            )
            .clip(width, height);
            ground_truth.push(GroundTruthObject { bbox, class_id: b.class_id });
        }

        let mut sample = ImageSample {
            image_id: image_id.clone(),
            image_width: width,
            image_height: height,
            predictions: boxes,
            ground_truth,
        };
        sample.validate_and_clip()?;
        inputs.push((image_id, input));
        samples.push(sample);
    }
    Ok(PhysicalCorpus { det, inputs, samples })
}
