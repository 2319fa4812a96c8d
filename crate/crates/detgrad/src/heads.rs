//! Detector head families: raw-output layouts, anchor geometry and the
//! output transformations (with inverses) that map raw activations to boxes,
//! scores and class probabilities.

use serde::{Deserialize, Serialize};

use crate::detection::{argmax_lowest, BoundingBox, Instance};
use crate::error::{Error, Result};
use crate::flops::{FlopLedger, Phase};

/// The four supported head families. RPN and RoI together form the
/// two-stage detector; they are differentiated separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Yolo,
    Rpn,
    Roi,
    Retina,
}

impl HeadKind {
    /// Per-anchor raw output dimension: YOLO `4+1+C`, RPN `4+1`,
    /// RoI `4+(C+1)` with a leading background logit, focal head `4+C`.
    pub fn per_anchor_dim(self, num_classes: usize) -> usize {
        match self {
            HeadKind::Yolo => 5 + num_classes,
            HeadKind::Rpn => 5,
            HeadKind::Roi => 4 + num_classes + 1,
            HeadKind::Retina => 4 + num_classes,
        }
    }

    pub fn parts(self) -> &'static [LossPart] {
        match self {
            HeadKind::Yolo => {
                &[LossPart::Localization, LossPart::Score, LossPart::Classification]
            }
            HeadKind::Rpn => &[LossPart::Localization, LossPart::Score],
            HeadKind::Roi | HeadKind::Retina => {
                &[LossPart::Localization, LossPart::Classification]
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Yolo => "yolo",
            HeadKind::Rpn => "rpn",
            HeadKind::Roi => "roi",
            HeadKind::Retina => "retina",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "yolo" => Ok(HeadKind::Yolo),
            "rpn" => Ok(HeadKind::Rpn),
            "roi" => Ok(HeadKind::Roi),
            "retina" => Ok(HeadKind::Retina),
            other => Err(Error::validation(format!("unknown head kind '{other}'"))),
        }
    }
}

/// Additive parts of the detection loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossPart {
    Localization,
    Score,
    Classification,
}

impl LossPart {
    pub fn name(self) -> &'static str {
        match self {
            LossPart::Localization => "loc",
            LossPart::Score => "score",
            LossPart::Classification => "cls",
        }
    }
}

/// One anchor: the owning grid cell's top-left corner plus the prior box
/// in center form.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Anchor {
    /// Top-left corner `(c_x, c_y)` of the grid cell (YOLO offsets).
    pub cell: (f64, f64),
    /// Prior `(pi_x, pi_y, pi_w, pi_h)` in center form.
    pub prior: (f64, f64, f64, f64),
}

impl Anchor {
    pub fn prior_box(&self) -> BoundingBox {
        let (px, py, pw, ph) = self.prior;
        BoundingBox::from_center(px, py, pw, ph)
    }
}

/// Regular anchor lattice over a feature map. Anchor index order is
/// row-major over cells with the per-cell slot fastest:
/// `a = (row * w + col) * slots + m`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnchorGrid {
    pub cell_size: f64,
    pub anchors: Vec<Anchor>,
}

impl AnchorGrid {
    /// Build an `h x w` lattice with one anchor per (cell, prior) pair;
    /// priors are `(w, h)` sizes centered in their cell.
    pub fn regular(h: usize, w: usize, cell_size: f64, priors: &[(f64, f64)]) -> Result<Self> {
        if cell_size <= 0.0 || priors.is_empty() {
            return Err(Error::validation("anchor grid needs positive cell size and priors"));
        }
        if priors.iter().any(|&(pw, ph)| pw <= 0.0 || ph <= 0.0) {
            return Err(Error::validation("anchor priors must have positive size"));
        }
        let mut anchors = Vec::with_capacity(h * w * priors.len());
        for i in 0..h {
            for j in 0..w {
                let cx = j as f64 * cell_size;
                let cy = i as f64 * cell_size;
                for &(pw, ph) in priors {
                    anchors.push(Anchor {
                        cell: (cx, cy),
                        prior: (cx + 0.5 * cell_size, cy + 0.5 * cell_size, pw, ph),
                    });
                }
            }
        }
        Ok(AnchorGrid { cell_size, anchors })
    }

    pub fn n_out(&self) -> usize {
        self.anchors.len()
    }
}

/// Flat raw head outputs, one `dim`-vector per anchor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawOutputs {
    pub head: HeadKind,
    pub num_classes: usize,
    values: Vec<f64>,
}

impl RawOutputs {
    pub fn new(head: HeadKind, num_classes: usize, values: Vec<f64>) -> Result<Self> {
        let dim = head.per_anchor_dim(num_classes);
        if dim == 0 || values.len() % dim != 0 {
            return Err(Error::validation(format!(
                "raw output length {} is not a multiple of the per-anchor dimension {dim}",
                values.len()
            )));
        }
        Ok(RawOutputs { head, num_classes, values })
    }

    pub fn dim(&self) -> usize {
        self.head.per_anchor_dim(self.num_classes)
    }

    pub fn n_anchors(&self) -> usize {
        self.values.len() / self.dim()
    }

    pub fn anchor(&self, a: usize) -> &[f64] {
        let d = self.dim();
        &self.values[a * d..(a + 1) * d]
    }

    pub fn anchor_mut(&mut self, a: usize) -> &mut [f64] {
        let d = self.dim();
        &mut self.values[a * d..(a + 1) * d]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Largest f64 strictly below 1.
fn one_minus_ulp() -> f64 {
    f64::from_bits(1.0f64.to_bits() - 1)
}

/// Numerically stable sigmoid clamped into the open interval (0, 1).
pub fn sigmoid(x: f64) -> f64 {
    let v = if x >= 0.0 { 1.0 / (1.0 + (-x).exp()) } else { let e = x.exp(); e / (1.0 + e) };
    v.clamp(f64::MIN_POSITIVE, one_minus_ulp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / sum).clamp(f64::MIN_POSITIVE, one_minus_ulp())).collect()
}

/// Decoded components of one anchor before they are narrowed to an
/// [`Instance`]: the box, the display score and the full probability
/// vector (length `C+1` for the RoI head where index 0 is background).
#[derive(Debug, Clone, PartialEq)]
pub struct TransformedBox {
    pub bbox: BoundingBox,
    pub score: f64,
    pub probs: Vec<f64>,
}

/// Per-anchor sigmoid/softmax values retained from the transformation for
/// reuse in the loss-derivative path, mirroring a completed forward pass.
#[derive(Debug, Clone)]
pub struct TransformCache {
    /// YOLO/RPN: sigmoid of the score logit. RoI/Retina: display score.
    pub scores: Vec<f64>,
    /// YOLO/Retina: per-class sigmoids; RoI: softmax over C+1 entries.
    pub probs: Vec<Vec<f64>>,
}

impl TransformCache {
    /// Sigmoid/softmax values of the raw outputs, exactly as a completed
    /// forward pass would have produced them.
    pub fn compute(raw: &RawOutputs) -> Self {
        Self::compute_some(raw, None)
    }

    /// As [`TransformCache::compute`] but restricted to anchors passing the
    /// filter; other slots hold placeholders and must not be read.
    pub fn compute_filtered(raw: &RawOutputs, filter: &[bool]) -> Self {
        Self::compute_some(raw, Some(filter))
    }

    fn compute_some(raw: &RawOutputs, filter: Option<&[bool]>) -> Self {
        let mut scores = Vec::with_capacity(raw.n_anchors());
        let mut probs = Vec::with_capacity(raw.n_anchors());
        for a in 0..raw.n_anchors() {
            if let Some(f) = filter {
                if !f[a] {
                    scores.push(0.5);
                    probs.push(Vec::new());
                    continue;
                }
            }
            let tau = raw.anchor(a);
            match raw.head {
                HeadKind::Yolo => {
                    scores.push(sigmoid(tau[4]));
                    probs.push((0..raw.num_classes).map(|j| sigmoid(tau[5 + j])).collect());
                }
                HeadKind::Rpn => {
                    let s = sigmoid(tau[4]);
                    scores.push(s);
                    probs.push(vec![s]);
                }
                HeadKind::Roi => {
                    let p = softmax(&tau[4..]);
                    scores.push(p[1..].iter().cloned().fold(0.0, f64::max));
                    probs.push(p);
                }
                HeadKind::Retina => {
                    let p: Vec<f64> =
                        (0..raw.num_classes).map(|j| sigmoid(tau[4 + j])).collect();
                    scores.push(p.iter().cloned().fold(0.0, f64::max));
                    probs.push(p);
                }
            }
        }
        TransformCache { scores, probs }
    }
}

/// Decode the raw outputs of anchor `a` into box, score and probabilities.
pub fn transform_anchor(raw: &RawOutputs, grid: &AnchorGrid, a: usize) -> Result<TransformedBox> {
    transform_anchor_impl(raw, grid, a, None)
}

/// As [`transform_anchor`], charging the arithmetic to the `postprocess`
/// phase (used for MC-dropout sample decoding).
pub fn transform_anchor_counted(
    raw: &RawOutputs,
    grid: &AnchorGrid,
    a: usize,
    ledger: &mut FlopLedger,
) -> Result<TransformedBox> {
    transform_anchor_impl(raw, grid, a, Some(ledger))
}

fn transform_anchor_impl(
    raw: &RawOutputs,
    grid: &AnchorGrid,
    a: usize,
    mut ledger: Option<&mut FlopLedger>,
) -> Result<TransformedBox> {
    let tau = raw.anchor(a);
    if tau.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation(format!("non-finite raw output at anchor {a}")));
    }
    let anchor = &grid.anchors[a];
    let (pi_x, pi_y, pi_w, pi_h) = anchor.prior;
    let c = raw.num_classes;

    let count = |l: &mut Option<&mut FlopLedger>, flops: u64, evals: u64| {
        if let Some(ledger) = l.as_deref_mut() {
            ledger.add_flops(Phase::Postprocess, flops);
            ledger.add_evals(Phase::Postprocess, evals);
        }
    };

    let (bbox, score, probs) = match raw.head {
        HeadKind::Yolo => {
            let ell = grid.cell_size;
            let (cx_cell, cy_cell) = anchor.cell;
            // x = ell*sigma(tau_x) + c_x, w = pi_w * exp(tau_w)
            let x = ell * sigmoid(tau[0]) + cx_cell;
            let y = ell * sigmoid(tau[1]) + cy_cell;
            let w = pi_w * tau[2].exp();
            let h = pi_h * tau[3].exp();
            let s = sigmoid(tau[4]);
            let probs: Vec<f64> = (0..c).map(|j| sigmoid(tau[5 + j])).collect();
            count(&mut ledger, 6, 5 + c as u64);
            (BoundingBox::from_center(x, y, w, h), s, probs)
        }
        HeadKind::Rpn => {
            let x = pi_w * tau[0] + pi_x;
            let y = pi_h * tau[1] + pi_y;
            let w = pi_w * tau[2].exp();
            let h = pi_h * tau[3].exp();
            let s = sigmoid(tau[4]);
            count(&mut ledger, 6, 3);
            (BoundingBox::from_center(x, y, w, h), s, vec![s])
        }
        HeadKind::Roi => {
            let x = pi_w * tau[0] + pi_x;
            let y = pi_h * tau[1] + pi_y;
            let w = pi_w * tau[2].exp();
            let h = pi_h * tau[3].exp();
            let probs = softmax(&tau[4..4 + c + 1]);
            // max foreground softmax probability serves as the display score
            let s = probs[1..].iter().cloned().fold(0.0, f64::max);
            count(&mut ledger, 6 + 2 * c as u64 + 1, 3 + c as u64);
            (BoundingBox::from_center(x, y, w, h), s, probs)
        }
        HeadKind::Retina => {
            let x = pi_w * tau[0] + pi_x;
            let y = pi_h * tau[1] + pi_y;
            let w = pi_w * tau[2].exp();
            let h = pi_h * tau[3].exp();
            let probs: Vec<f64> = (0..c).map(|j| sigmoid(tau[4 + j])).collect();
            let s = probs.iter().cloned().fold(0.0, f64::max);
            count(&mut ledger, 6, 2 + c as u64);
            (BoundingBox::from_center(x, y, w, h), s, probs)
        }
    };
    Ok(TransformedBox { bbox, score, probs })
}

/// Re-encode decoded components into raw-output scale. Exact inverse of
/// [`transform_anchor`] for YOLO/RPN/Retina; for the RoI softmax the
/// canonical log-probability gauge is used, so the decoded probabilities
/// (not necessarily the raw logits) round-trip.
pub fn inverse_transform_anchor(
    head: HeadKind,
    tb: &TransformedBox,
    grid: &AnchorGrid,
    a: usize,
) -> Result<Vec<f64>> {
    let anchor = &grid.anchors[a];
    let (pi_x, pi_y, pi_w, pi_h) = anchor.prior;
    let (cx, cy, w, h) = tb.bbox.center();
    if w <= 0.0 || h <= 0.0 {
        return Err(Error::validation(format!("cannot encode degenerate box at anchor {a}")));
    }
    let mut out = Vec::new();
    match head {
        HeadKind::Yolo => {
            let ell = grid.cell_size;
            let (ccx, ccy) = anchor.cell;
            let ux = (cx - ccx) / ell;
            let uy = (cy - ccy) / ell;
            if !(0.0 < ux && ux < 1.0 && 0.0 < uy && uy < 1.0) {
                return Err(Error::validation(format!(
                    "box center not strictly inside the cell of anchor {a}"
                )));
            }
            out.push(logit(ux));
            out.push(logit(uy));
            out.push((w / pi_w).ln());
            out.push((h / pi_h).ln());
            out.push(logit(tb.score));
            for p in &tb.probs {
                out.push(logit(*p));
            }
        }
        HeadKind::Rpn => {
            out.push((cx - pi_x) / pi_w);
            out.push((cy - pi_y) / pi_h);
            out.push((w / pi_w).ln());
            out.push((h / pi_h).ln());
            out.push(logit(tb.score));
        }
        HeadKind::Roi => {
            out.push((cx - pi_x) / pi_w);
            out.push((cy - pi_y) / pi_h);
            out.push((w / pi_w).ln());
            out.push((h / pi_h).ln());
            for p in &tb.probs {
                out.push(p.ln());
            }
        }
        HeadKind::Retina => {
            out.push((cx - pi_x) / pi_w);
            out.push((cy - pi_y) / pi_h);
            out.push((w / pi_w).ln());
            out.push((h / pi_h).ln());
            for p in &tb.probs {
                out.push(logit(*p));
            }
        }
    }
    Ok(out)
}

/// Decode every anchor into an [`Instance`].
pub fn transform_outputs(raw: &RawOutputs, grid: &AnchorGrid) -> Result<Vec<Instance>> {
    transform_outputs_counted(raw, grid, None).map(|(i, _)| i)
}

/// As [`transform_outputs`], optionally counting post-processing cost and
/// returning the sigmoid/softmax cache for the derivative path.
pub fn transform_outputs_counted(
    raw: &RawOutputs,
    grid: &AnchorGrid,
    mut ledger: Option<&mut FlopLedger>,
) -> Result<(Vec<Instance>, TransformCache)> {
    if raw.n_anchors() != grid.n_out() {
        return Err(Error::validation(format!(
            "raw outputs carry {} anchors but the grid has {}",
            raw.n_anchors(),
            grid.n_out()
        )));
    }
    let mut instances = Vec::with_capacity(grid.n_out());
    let mut cache = TransformCache { scores: Vec::new(), probs: Vec::new() };
    for a in 0..grid.n_out() {
        let tb = transform_anchor_impl(raw, grid, a, ledger.as_deref_mut())?;
        let class_probs = match raw.head {
            HeadKind::Roi => tb.probs[1..].to_vec(),
            _ => tb.probs.clone(),
        };
        let class_id = argmax_lowest(&class_probs) + 1;
        cache.scores.push(tb.score);
        cache.probs.push(tb.probs.clone());
        instances.push(Instance {
            bbox: tb.bbox,
            score: tb.score,
            class_probs,
            class_id,
            anchor_index: a,
            raw_outputs: Some(raw.anchor(a).to_vec()),
        });
    }
    Ok((instances, cache))
}

/// Ground-truth localization encoded to raw-output scale relative to one
/// anchor. For YOLO, `x`/`y` hold the cell-relative offsets (the sigmoid of
/// the raw target); for the other heads they hold the raw offsets directly.
/// `w`/`h` always hold log size ratios.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocTarget {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

pub fn encode_loc_target(
    head: HeadKind,
    grid: &AnchorGrid,
    a: usize,
    gt_box: &BoundingBox,
) -> LocTarget {
    let anchor = &grid.anchors[a];
    let (pi_x, pi_y, pi_w, pi_h) = anchor.prior;
    let (cx, cy, w, h) = gt_box.center();
    match head {
        HeadKind::Yolo => {
            let ell = grid.cell_size;
            let (ccx, ccy) = anchor.cell;
            LocTarget {
                x: (cx - ccx) / ell,
                y: (cy - ccy) / ell,
                w: (w / pi_w).ln(),
                h: (h / pi_h).ln(),
            }
        }
        _ => LocTarget {
            x: (cx - pi_x) / pi_w,
            y: (cy - pi_y) / pi_h,
            w: (w / pi_w).ln(),
            h: (h / pi_h).ln(),
        },
    }
}
