//! The detection loss families (YOLO-style, RPN/RoI-style, focal-style),
//! anchor assignment, RPN batch sampling, and the closed-form loss
//! derivatives w.r.t. the raw head outputs.
//!
//! The derivative path optionally instruments an exact FLOP ledger under
//! the convention that sigmoids/softmaxes of the raw outputs were already
//! produced by the forward pass (they are taken from a [`TransformCache`]),
//! while logarithms in the focal loss are fresh elementary evaluations.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::detection::{iou, GroundTruthObject};
use crate::error::{Error, Result};
use crate::flops::{FlopLedger, Phase};
use crate::heads::{encode_loc_target, AnchorGrid, HeadKind, LossPart, RawOutputs, TransformCache};

/// IoU thresholds controlling the prediction-independent anchor/ground-truth
/// association, plus the best-anchor-per-object guarantee.
#[derive(Debug, Clone, Copy)]
pub struct AssignmentConfig {
    pub eps_pos: f64,
    pub eps_neg: f64,
    /// Additionally mark, for every ground-truth object, its maximum-IoU
    /// anchor as associated so each object is learnable.
    pub best_anchor_per_gt: bool,
}

impl AssignmentConfig {
    pub fn for_head(head: HeadKind) -> Self {
        let (eps_pos, eps_neg) = match head {
            HeadKind::Yolo => (0.5, 0.5),
            HeadKind::Rpn => (0.7, 0.3),
            HeadKind::Roi => (0.5, 0.5),
            HeadKind::Retina => (0.5, 0.4),
        };
        AssignmentConfig { eps_pos, eps_neg, best_anchor_per_gt: true }
    }
}

/// Anchor/object association tensors. `obj[a][t]` marks anchor `a` as
/// associated with object `t`; the background flag is constant along each
/// row, so it is stored per anchor.
#[derive(Debug, Clone)]
pub struct AssignmentTensors {
    pub obj: Vec<Vec<bool>>,
    pub noobj: Vec<bool>,
    pub n_gt: usize,
    /// Total number of true `obj` entries.
    pub n_obj_entries: usize,
}

impl AssignmentTensors {
    pub fn n_obj_for(&self, a: usize) -> usize {
        self.obj[a].iter().filter(|&&o| o).count()
    }

    pub fn any_obj(&self, a: usize) -> bool {
        self.obj[a].iter().any(|&o| o)
    }
}

/// Associate anchors with ground-truth objects from IoU thresholds alone;
/// depends only on the ground truth and the fixed anchors, never on
/// predictions. Optionally counts the pairwise IoU work into `mask_iou`.
pub fn compute_assignments(
    gt: &[GroundTruthObject],
    grid: &AnchorGrid,
    cfg: &AssignmentConfig,
    mut ledger: Option<&mut FlopLedger>,
) -> AssignmentTensors {
    let n = grid.n_out();
    let mut obj = vec![vec![false; gt.len()]; n];
    let mut max_iou = vec![0.0f64; n];
    for (t, g) in gt.iter().enumerate() {
        let mut best_anchor = 0usize;
        let mut best = f64::NEG_INFINITY;
        for a in 0..n {
            let v = iou(&grid.anchors[a].prior_box(), &g.bbox);
            if v >= cfg.eps_pos {
                obj[a][t] = true;
            }
            if v > best {
                best = v;
                best_anchor = a;
            }
            if v > max_iou[a] {
                max_iou[a] = v;
            }
        }
        if cfg.best_anchor_per_gt {
            obj[best_anchor][t] = true;
        }
    }
    if let Some(ledger) = ledger.as_deref_mut() {
        ledger.add_flops(Phase::MaskIou, 12 * (n as u64) * (gt.len() as u64));
    }
    let noobj: Vec<bool> = (0..n)
        .map(|a| max_iou[a] < cfg.eps_neg && !obj[a].iter().any(|&o| o))
        .collect();
    let n_obj_entries = obj.iter().flat_map(|row| row.iter()).filter(|&&o| o).count();
    AssignmentTensors { obj, noobj, n_gt: gt.len(), n_obj_entries }
}

/// Sampled positive/negative anchors entering the RPN loss.
#[derive(Debug, Clone)]
pub struct SampleMasks {
    pub pos: Vec<bool>,
    pub neg: Vec<bool>,
    pub batch: usize,
    pub seed: u64,
}

impl SampleMasks {
    /// Draw `min(|pos pool|, b/2)` positives and `min(|neg pool|, b - n_pos)`
    /// negatives without replacement, deterministically under `seed`.
    pub fn sample(assign: &AssignmentTensors, batch: usize, seed: u64) -> Self {
        let pos_pool: Vec<usize> =
            (0..assign.obj.len()).filter(|&a| assign.any_obj(a)).collect();
        let neg_pool: Vec<usize> = (0..assign.noobj.len()).filter(|&a| assign.noobj[a]).collect();
        let n_pos = pos_pool.len().min(batch / 2);
        let n_neg = neg_pool.len().min(batch.saturating_sub(n_pos));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pos = vec![false; assign.obj.len()];
        for &a in pick(&pos_pool, n_pos, &mut rng).iter() {
            pos[a] = true;
        }
        let mut neg = vec![false; assign.noobj.len()];
        for &a in pick(&neg_pool, n_neg, &mut rng).iter() {
            neg[a] = true;
        }
        SampleMasks { pos, neg, batch, seed }
    }

    /// Every eligible anchor sampled (the no-subsampling limit).
    pub fn all_eligible(assign: &AssignmentTensors) -> Self {
        SampleMasks {
            pos: (0..assign.obj.len()).map(|a| assign.any_obj(a)).collect(),
            neg: assign.noobj.clone(),
            batch: usize::MAX,
            seed: 0,
        }
    }

    pub fn n_pos(&self) -> usize {
        self.pos.iter().filter(|&&p| p).count()
    }
}

/// Partial Fisher-Yates draw of `n` distinct elements.
fn pick(pool: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut items = pool.to_vec();
    for i in 0..n {
        let j = rng.random_range(i..items.len());
        items.swap(i, j);
    }
    items.truncate(n);
    items
}

/// Loss hyperparameters: the smooth-L1 knee and the focal-loss constants.
#[derive(Debug, Clone, Copy)]
pub struct LossHyper {
    pub smooth_l1_beta: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossHyper {
    fn default() -> Self {
        LossHyper { smooth_l1_beta: 1.0 / 9.0, focal_alpha: 0.25, focal_gamma: 2.0 }
    }
}

/// Everything a loss evaluation needs; predictions enter through `raw`
/// (and the matching `cache`), ground truth through `gt`/`assign`.
pub struct LossContext<'a> {
    pub raw: &'a RawOutputs,
    pub grid: &'a AnchorGrid,
    pub gt: &'a [GroundTruthObject],
    pub assign: &'a AssignmentTensors,
    pub masks: Option<&'a SampleMasks>,
    pub cache: &'a TransformCache,
    pub hyper: LossHyper,
}

impl<'a> LossContext<'a> {
    pub fn head(&self) -> HeadKind {
        self.raw.head
    }

    fn masks_for_rpn(&self) -> Result<&'a SampleMasks> {
        self.masks.ok_or_else(|| {
            Error::validation("RPN losses require sample masks (use SampleMasks::all_eligible)")
        })
    }
}

/// Sparse loss derivative: one dense per-anchor component vector for every
/// anchor carrying an association (obj/noobj, or a sampled one for RPN).
#[derive(Debug, Clone)]
pub struct LossPartDerivative {
    pub head: HeadKind,
    pub part: LossPart,
    pub entries: BTreeMap<usize, Vec<f64>>,
}

fn bce(p: f64, q: f64) -> f64 {
    -(q * p.ln() + (1.0 - q) * (1.0 - p).ln())
}

fn smooth_l1(d: f64, beta: f64) -> f64 {
    let a = d.abs();
    if a < beta {
        0.5 * d * d / beta
    } else {
        a - 0.5 * beta
    }
}

/// Subgradient convention sgn(0) = 0.
fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
fn smooth_l1_deriv(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        d / beta
    } else {
        sgn(d)
    }
}

fn inv_or_zero(n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        1.0 / n as f64
    }
}

/// Scalar value of one loss part, restricted to anchors passing `filter`
/// (None keeps all). Normalizers are global properties of the assignment
/// and sampling, independent of the filter.
pub fn loss_value(ctx: &LossContext, part: LossPart, filter: Option<&[bool]>) -> Result<f64> {
    let keep = |a: usize| filter.map(|f| f[a]).unwrap_or(true);
    let head = ctx.head();
    if !head.parts().contains(&part) {
        return Err(Error::validation(format!(
            "head {} has no {} loss part",
            head.name(),
            part.name()
        )));
    }
    let n = ctx.raw.n_anchors();
    let hyper = &ctx.hyper;
    let mut total = 0.0;
    match (head, part) {
        (HeadKind::Yolo, LossPart::Localization) => {
            for a in (0..n).filter(|&a| keep(a)) {
                let tau = ctx.raw.anchor(a);
                let sx = crate::heads::sigmoid(tau[0]);
                let sy = crate::heads::sigmoid(tau[1]);
                for t in obj_ts(ctx.assign, a) {
                    let tgt = encode_loc_target(head, ctx.grid, a, &ctx.gt[t].bbox);
                    let dw = tau[2] - tgt.w;
                    let dh = tau[3] - tgt.h;
                    total += dw * dw + dh * dh + bce(sx, tgt.x) + bce(sy, tgt.y);
                }
            }
            total *= 2.0;
        }
        (HeadKind::Yolo, LossPart::Score) => {
            for a in (0..n).filter(|&a| keep(a)) {
                let s = ctx.cache.scores[a];
                let n_obj = ctx.assign.n_obj_for(a);
                if n_obj > 0 {
                    total += n_obj as f64 * (-s.ln());
                }
                if ctx.assign.noobj[a] && ctx.assign.n_gt > 0 {
                    total += ctx.assign.n_gt as f64 * (-(1.0 - s).ln());
                }
            }
        }
        (HeadKind::Yolo, LossPart::Classification) => {
            for a in (0..n).filter(|&a| keep(a)) {
                let probs = &ctx.cache.probs[a];
                for t in obj_ts(ctx.assign, a) {
                    let k = ctx.gt[t].class_id - 1;
                    for (i, p) in probs.iter().enumerate() {
                        total += bce(*p, if i == k { 1.0 } else { 0.0 });
                    }
                }
            }
        }
        (HeadKind::Rpn, LossPart::Localization) => {
            let masks = ctx.masks_for_rpn()?;
            let inv_pos = inv_or_zero(masks.n_pos());
            for a in (0..n).filter(|&a| keep(a) && masks.pos[a]) {
                let tau = ctx.raw.anchor(a);
                for t in obj_ts(ctx.assign, a) {
                    let tgt = encode_loc_target(head, ctx.grid, a, &ctx.gt[t].bbox);
                    for (v, g) in tau[..4].iter().zip([tgt.x, tgt.y, tgt.w, tgt.h]) {
                        total += smooth_l1(v - g, hyper.smooth_l1_beta);
                    }
                }
            }
            total *= inv_pos;
        }
        (HeadKind::Rpn, LossPart::Score) => {
            let masks = ctx.masks_for_rpn()?;
            for a in (0..n).filter(|&a| keep(a)) {
                let s = ctx.cache.scores[a];
                let n_obj = ctx.assign.n_obj_for(a);
                if masks.pos[a] && n_obj > 0 {
                    total += n_obj as f64 * (-s.ln());
                }
                if masks.neg[a] && ctx.assign.noobj[a] && ctx.assign.n_gt > 0 {
                    total += ctx.assign.n_gt as f64 * (-(1.0 - s).ln());
                }
            }
        }
        (HeadKind::Roi, LossPart::Localization) => {
            let inv_obj = inv_or_zero(ctx.assign.n_obj_entries);
            for a in (0..n).filter(|&a| keep(a)) {
                let tau = ctx.raw.anchor(a);
                for t in obj_ts(ctx.assign, a) {
                    let tgt = encode_loc_target(head, ctx.grid, a, &ctx.gt[t].bbox);
                    for (v, g) in tau[..4].iter().zip([tgt.x, tgt.y, tgt.w, tgt.h]) {
                        total += smooth_l1(v - g, hyper.smooth_l1_beta);
                    }
                }
            }
            total *= inv_obj;
        }
        (HeadKind::Roi, LossPart::Classification) => {
            for a in (0..n).filter(|&a| keep(a)) {
                let probs = &ctx.cache.probs[a]; // softmax over C+1, background first
                for t in obj_ts(ctx.assign, a) {
                    total += -probs[ctx.gt[t].class_id].ln();
                }
                if ctx.assign.noobj[a] && ctx.assign.n_gt > 0 {
                    total += ctx.assign.n_gt as f64 * (-probs[0].ln());
                }
            }
        }
        (HeadKind::Retina, LossPart::Localization) => {
            let inv_obj = inv_or_zero(ctx.assign.n_obj_entries);
            for a in (0..n).filter(|&a| keep(a)) {
                let tau = ctx.raw.anchor(a);
                for t in obj_ts(ctx.assign, a) {
                    let tgt = encode_loc_target(head, ctx.grid, a, &ctx.gt[t].bbox);
                    for (v, g) in tau[..4].iter().zip([tgt.x, tgt.y, tgt.w, tgt.h]) {
                        total += (v - g).abs();
                    }
                }
            }
            total *= inv_obj;
        }
        (HeadKind::Retina, LossPart::Classification) => {
            let inv_obj = inv_or_zero(ctx.assign.n_obj_entries);
            let (alpha, gamma) = (hyper.focal_alpha, hyper.focal_gamma);
            for a in (0..n).filter(|&a| keep(a)) {
                let probs = &ctx.cache.probs[a];
                for t in obj_ts(ctx.assign, a) {
                    let k = ctx.gt[t].class_id - 1;
                    for (j, sig) in probs.iter().enumerate() {
                        let q = if j == k { 1.0 } else { 0.0 };
                        total += alpha * (1.0 - sig).powf(gamma) * bce(*sig, q);
                    }
                }
                if ctx.assign.noobj[a] && ctx.assign.n_gt > 0 {
                    let mult = ctx.assign.n_gt as f64;
                    for sig in probs {
                        total += mult * (1.0 - alpha) * sig.powf(gamma) * bce(*sig, 0.0);
                    }
                }
            }
            total *= inv_obj;
        }
        _ => unreachable!("part validity checked above"),
    }
    Ok(total)
}

fn obj_ts<'b>(assign: &'b AssignmentTensors, a: usize) -> impl Iterator<Item = usize> + 'b {
    assign.obj[a]
        .iter()
        .enumerate()
        .filter_map(|(t, &o)| if o { Some(t) } else { None })
}

/// Closed-form derivative of one loss part w.r.t. the raw outputs,
/// restricted to anchors passing `filter`. When `ledger` is given, each
/// arithmetic operation is counted into the `dloss` phase and each fresh
/// logarithm/power into its elementary counter.
pub fn loss_derivative(
    ctx: &LossContext,
    part: LossPart,
    filter: Option<&[bool]>,
    mut ledger: Option<&mut FlopLedger>,
) -> Result<LossPartDerivative> {
    let keep = |a: usize| filter.map(|f| f[a]).unwrap_or(true);
    let head = ctx.head();
    if !head.parts().contains(&part) {
        return Err(Error::validation(format!(
            "head {} has no {} loss part",
            head.name(),
            part.name()
        )));
    }
    let n = ctx.raw.n_anchors();
    let dim = ctx.raw.dim();
    let c = ctx.raw.num_classes;
    let hyper = &ctx.hyper;
    let mut entries: BTreeMap<usize, Vec<f64>> = BTreeMap::new();

    macro_rules! flops {
        ($n:expr) => {
            if let Some(l) = ledger.as_deref_mut() {
                l.add_flops(Phase::DLoss, $n);
            }
        };
    }
    macro_rules! evals {
        ($n:expr) => {
            if let Some(l) = ledger.as_deref_mut() {
                l.add_evals(Phase::DLoss, $n);
            }
        };
    }

    match (head, part) {
        (HeadKind::Yolo, LossPart::Localization) => {
            for a in (0..n).filter(|&a| keep(a) && ctx.assign.any_obj(a)) {
                let tau = ctx.raw.anchor(a);
                let sx = crate::heads::sigmoid(tau[0]);
                let sy = crate::heads::sigmoid(tau[1]);
                let mut d = vec![0.0; dim];
                let mut pairs = 0u64;
                for t in obj_ts(ctx.assign, a) {
                    let tgt = encode_loc_target(head, ctx.grid, a, &ctx.gt[t].bbox);
                    d[0] += 2.0 * (sx - tgt.x);
                    d[1] += 2.0 * (sy - tgt.y);
                    d[2] += 4.0 * (tau[2] - tgt.w);
                    d[3] += 4.0 * (tau[3] - tgt.h);
                    pairs += 1;
                }
                flops!(8 * pairs + 4 * pairs.saturating_sub(1));
                entries.insert(a, d);
            }
        }
        (HeadKind::Yolo, LossPart::Score) => {
            for a in (0..n).filter(|&a| keep(a)) {
                let n_obj = ctx.assign.n_obj_for(a) as f64;
                let bg = ctx.assign.noobj[a] && ctx.assign.n_gt > 0;
                if n_obj == 0.0 && !bg {
                    continue;
                }
                let s = ctx.cache.scores[a];
                let mut d = vec![0.0; dim];
                if n_obj > 0.0 {
                    d[4] += n_obj * (s - 1.0);
                    flops!(if n_obj == 1.0 { 1 } else { 2 });
                }
                if bg {
                    let mult = ctx.assign.n_gt as f64;
                    d[4] += mult * s;
                    flops!(if ctx.assign.n_gt == 1 { 0 } else { 1 });
                }
                entries.insert(a, d);
            }
        }
        (HeadKind::Yolo, LossPart::Classification) => {
            for a in (0..n).filter(|&a| keep(a) && ctx.assign.any_obj(a)) {
                let probs = &ctx.cache.probs[a];
                let mut d = vec![0.0; dim];
                let mut pairs = 0u64;
                for t in obj_ts(ctx.assign, a) {
                    let k = ctx.gt[t].class_id - 1;
                    for (i, p) in probs.iter().enumerate() {
                        d[5 + i] += p - if i == k { 1.0 } else { 0.0 };
                    }
                    pairs += 1;
                }
                flops!(c as u64 * (2 * pairs - 1));
                entries.insert(a, d);
            }
        }
        (HeadKind::Rpn, LossPart::Localization) => {
            let masks = ctx.masks_for_rpn()?;
            let inv_pos = inv_or_zero(masks.n_pos());
            let scaled = inv_pos / hyper.smooth_l1_beta;
            flops!(2); // the two shared constants
            for a in (0..n).filter(|&a| keep(a) && masks.pos[a] && ctx.assign.any_obj(a)) {
                let tau = ctx.raw.anchor(a);
                let mut d = vec![0.0; dim];
                let mut pairs = 0u64;
                for t in obj_ts(ctx.assign, a) {
                    let tgt = encode_loc_target(head, ctx.grid, a, &ctx.gt[t].bbox);
                    for (r, g) in [tgt.x, tgt.y, tgt.w, tgt.h].into_iter().enumerate() {
                        let res = tau[r] - g;
                        d[r] += if res.abs() < hyper.smooth_l1_beta {
                            res * scaled
                        } else {
                            sgn(res) * inv_pos
                        };
                    }
                    pairs += 1;
                }
                flops!(8 * pairs + 4 * pairs.saturating_sub(1));
                entries.insert(a, d);
            }
        }
        (HeadKind::Rpn, LossPart::Score) => {
            let masks = ctx.masks_for_rpn()?;
            for a in (0..n).filter(|&a| keep(a)) {
                let n_obj = if masks.pos[a] { ctx.assign.n_obj_for(a) as f64 } else { 0.0 };
                let bg = masks.neg[a] && ctx.assign.noobj[a] && ctx.assign.n_gt > 0;
                if n_obj == 0.0 && !bg {
                    continue;
                }
                let s = ctx.cache.scores[a];
                let mut d = vec![0.0; dim];
                if n_obj > 0.0 {
                    d[4] += n_obj * (s - 1.0);
                    flops!(if n_obj == 1.0 { 1 } else { 2 });
                }
                if bg {
                    d[4] += ctx.assign.n_gt as f64 * s;
                    flops!(if ctx.assign.n_gt == 1 { 0 } else { 1 });
                }
                entries.insert(a, d);
            }
        }
        (HeadKind::Roi, LossPart::Localization) => {
            let inv_obj = inv_or_zero(ctx.assign.n_obj_entries);
            let scaled = inv_obj / hyper.smooth_l1_beta;
            flops!(2);
            for a in (0..n).filter(|&a| keep(a) && ctx.assign.any_obj(a)) {
                let tau = ctx.raw.anchor(a);
                let mut d = vec![0.0; dim];
                let mut pairs = 0u64;
                for t in obj_ts(ctx.assign, a) {
                    let tgt = encode_loc_target(head, ctx.grid, a, &ctx.gt[t].bbox);
                    for (r, g) in [tgt.x, tgt.y, tgt.w, tgt.h].into_iter().enumerate() {
                        let res = tau[r] - g;
                        d[r] += if res.abs() < hyper.smooth_l1_beta {
                            res * scaled
                        } else {
                            sgn(res) * inv_obj
                        };
                    }
                    pairs += 1;
                }
                flops!(8 * pairs + 4 * pairs.saturating_sub(1));
                entries.insert(a, d);
            }
        }
        (HeadKind::Roi, LossPart::Classification) => {
            for a in (0..n).filter(|&a| keep(a)) {
                let n_obj = ctx.assign.n_obj_for(a);
                let bg = ctx.assign.noobj[a] && ctx.assign.n_gt > 0;
                if n_obj == 0 && !bg {
                    continue;
                }
                let probs = &ctx.cache.probs[a];
                let mut d = vec![0.0; dim];
                let mut first = true;
                for t in obj_ts(ctx.assign, a) {
                    for k in 0..=c {
                        d[4 + k] += probs[k] - if k == ctx.gt[t].class_id { 1.0 } else { 0.0 };
                    }
                    flops!(if first { 1 } else { 2 + c as u64 });
                    first = false;
                }
                if bg {
                    let mult = ctx.assign.n_gt as f64;
                    for k in 0..=c {
                        d[4 + k] += mult * (probs[k] - if k == 0 { 1.0 } else { 0.0 });
                    }
                    flops!(if ctx.assign.n_gt == 1 { 1 } else { 2 + c as u64 });
                    if !first {
                        flops!(1 + c as u64);
                    }
                }
                entries.insert(a, d);
            }
        }
        (HeadKind::Retina, LossPart::Localization) => {
            let inv_obj = inv_or_zero(ctx.assign.n_obj_entries);
            flops!(1);
            for a in (0..n).filter(|&a| keep(a) && ctx.assign.any_obj(a)) {
                let tau = ctx.raw.anchor(a);
                let mut d = vec![0.0; dim];
                let mut pairs = 0u64;
                for t in obj_ts(ctx.assign, a) {
                    let tgt = encode_loc_target(head, ctx.grid, a, &ctx.gt[t].bbox);
                    for (r, g) in [tgt.x, tgt.y, tgt.w, tgt.h].into_iter().enumerate() {
                        d[r] += sgn(tau[r] - g) * inv_obj;
                    }
                    pairs += 1;
                }
                flops!(8 * pairs + 4 * pairs.saturating_sub(1));
                entries.insert(a, d);
            }
        }
        (HeadKind::Retina, LossPart::Classification) => {
            let inv_obj = inv_or_zero(ctx.assign.n_obj_entries);
            let (alpha, gamma) = (hyper.focal_alpha, hyper.focal_gamma);
            let gamma_is_two = gamma == 2.0;
            flops!(1);
            for a in (0..n).filter(|&a| keep(a)) {
                let n_obj = ctx.assign.n_obj_for(a);
                let bg = ctx.assign.noobj[a] && ctx.assign.n_gt > 0;
                if n_obj == 0 && !bg {
                    continue;
                }
                let probs = &ctx.cache.probs[a];
                let mut d = vec![0.0; dim];
                let mut pairs = 0u64;
                for t in obj_ts(ctx.assign, a) {
                    let k = ctx.gt[t].class_id - 1;
                    for (j, &sig) in probs.iter().enumerate() {
                        let u = 1.0 - sig;
                        let focal = if gamma_is_two { u * u } else { u.powf(gamma) };
                        let weight = alpha * focal;
                        let target = if j == k { 1.0 } else { 0.0 };
                        let bce_j = if j == k { -sig.ln() } else { -u.ln() };
                        let bracket = (sig - target) - gamma * sig * bce_j;
                        d[4 + j] += weight * bracket * inv_obj;
                        flops!(10);
                        evals!(if gamma_is_two { 1 } else { 2 });
                    }
                    pairs += 1;
                }
                if pairs > 1 {
                    flops!(c as u64 * (pairs - 1));
                }
                if bg {
                    let mult = ctx.assign.n_gt as f64;
                    for (j, &sig) in probs.iter().enumerate() {
                        let focal = if gamma_is_two { sig * sig } else { sig.powf(gamma) };
                        let weight = (1.0 - alpha) * focal;
                        let u = 1.0 - sig;
                        let bracket = sig - gamma * u * u.ln();
                        d[4 + j] += mult * weight * bracket * inv_obj;
                        flops!(if ctx.assign.n_gt == 1 { 8 } else { 9 });
                        evals!(if gamma_is_two { 1 } else { 2 });
                    }
                    if pairs > 0 {
                        flops!(c as u64);
                    }
                }
                entries.insert(a, d);
            }
        }
        _ => unreachable!(),
    }
    Ok(LossPartDerivative { head, part, entries })
}

/// Total loss over all parts of the head.
pub fn total_loss(ctx: &LossContext, filter: Option<&[bool]>) -> Result<f64> {
    let mut sum = 0.0;
    for &part in ctx.head().parts() {
        sum += loss_value(ctx, part, filter)?;
    }
    Ok(sum)
}
