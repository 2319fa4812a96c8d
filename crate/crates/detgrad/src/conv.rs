//! Small stride-1 convolutional head with manual backpropagation.
//!
//! Computes per-box masked gradients of the detection loss w.r.t. the last
//! two kernel stacks while maintaining an exact per-phase FLOP ledger.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detection::{GroundTruthObject, Instance};
use crate::error::{Error, Result};
use crate::flops::{FlopLedger, Phase};
use crate::heads::{
    transform_outputs_counted, AnchorGrid, HeadKind, LossPart, RawOutputs, TransformCache,
};
use crate::loss::{
    compute_assignments, loss_derivative, loss_value, AssignmentConfig, LossContext, LossHyper,
    SampleMasks,
};

/// Dense channel-major tensor `[channels x height x width]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap { channels, height, width, values: vec![0.0; channels * height * width] }
    }

    pub fn from_values(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != channels * height * width {
            return Err(Error::validation(format!(
                "feature map length {} does not match {channels}x{height}x{width}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("non-finite feature map entry"));
        }
        Ok(FeatureMap { channels, height, width, values })
    }

    pub fn random<R: Rng>(channels: usize, height: usize, width: usize, scale: f64, rng: &mut R) -> Self {
        let values = (0..channels * height * width)
            .map(|_| rng.random_range(-scale..scale))
            .collect();
        FeatureMap { channels, height, width, values }
    }

    #[inline]
    pub fn idx(&self, c: usize, row: usize, col: usize) -> usize {
        (c * self.height + row) * self.width + col
    }

    #[inline]
    pub fn get(&self, c: usize, row: usize, col: usize) -> f64 {
        self.values[self.idx(c, row, col)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, row: usize, col: usize, v: f64) {
        let i = self.idx(c, row, col);
        self.values[i] = v;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Identity,
    LeakyRelu { slope: f64 },
}

impl Activation {
    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::LeakyRelu { slope } => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
        }
    }

    /// Derivative evaluated at the pre-activation; a diagonal of {1, slope}.
    #[inline]
    pub fn derivative(&self, pre: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::LeakyRelu { slope } => {
                if pre >= 0.0 {
                    1.0
                } else {
                    *slope
                }
            }
        }
    }
}

/// One stride-1 convolution layer with zero padding; spatial size is
/// conserved. Kernels are stored `[k_in][k_out][(2s+1)^2]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvLayer {
    pub k_in: usize,
    pub k_out: usize,
    /// Spatial extent `s`; the kernel window is `(2s+1) x (2s+1)`.
    pub extent: usize,
    pub kernels: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl ConvLayer {
    pub fn window(&self) -> usize {
        let k = 2 * self.extent + 1;
        k * k
    }

    #[inline]
    pub fn kidx(&self, c_in: usize, d_out: usize, o: usize) -> usize {
        (c_in * self.k_out + d_out) * self.window() + o
    }

    pub fn validate(&self, index: usize) -> Result<()> {
        if self.kernels.len() != self.k_in * self.k_out * self.window() {
            return Err(Error::validation(format!(
                "layer {index}: kernel stack has {} entries, expected {}",
                self.kernels.len(),
                self.k_in * self.k_out * self.window()
            )));
        }
        if self.bias.len() != self.k_out {
            return Err(Error::validation(format!(
                "layer {index}: bias has {} entries, expected {}",
                self.bias.len(),
                self.k_out
            )));
        }
        if self.kernels.iter().chain(self.bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::validation(format!("layer {index}: non-finite weights")));
        }
        Ok(())
    }
}

/// Stack of stride-1 convolution layers over a fixed `h x w` grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvHead {
    pub layers: Vec<ConvLayer>,
    pub height: usize,
    pub width: usize,
}

impl ConvHead {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::validation("conv head needs at least one layer"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.validate(i + 1)?;
            if i > 0 && self.layers[i - 1].k_out != l.k_in {
                return Err(Error::validation(format!(
                    "layer {}: expects {} input channels but layer {} emits {}",
                    i + 1,
                    l.k_in,
                    i,
                    self.layers[i - 1].k_out
                )));
            }
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map(|l| l.k_out).unwrap_or(0)
    }

    /// Run all layers, retaining pre- and post-activation maps.
    pub fn forward(&self, input: &FeatureMap) -> Result<ForwardPass> {
        self.validate()?;
        if input.channels != self.layers[0].k_in {
            return Err(Error::validation(format!(
                "layer 1: expects {} input channels, feature map has {}",
                self.layers[0].k_in, input.channels
            )));
        }
        if input.height != self.height || input.width != self.width {
            return Err(Error::validation(format!(
                "layer 1: expects {}x{} spatial size, feature map is {}x{}",
                self.height, self.width, input.height, input.width
            )));
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len());
        let mut current = input.clone();
        for layer in &self.layers {
            let psi = conv_forward(layer, &current);
            let mut phi = psi.clone();
            for v in &mut phi.values {
                *v = layer.activation.apply(*v);
            }
            pre.push(psi);
            post.push(phi.clone());
            current = phi;
        }
        Ok(ForwardPass { input: input.clone(), pre, post })
    }
}

/// Cross-correlation with zero padding, stride 1.
fn conv_forward(layer: &ConvLayer, input: &FeatureMap) -> FeatureMap {
    let (h, w) = (input.height, input.width);
    let s = layer.extent as isize;
    let win = 2 * layer.extent + 1;
    let mut out = FeatureMap::zeros(layer.k_out, h, w);
    for d in 0..layer.k_out {
        for row in 0..h {
            for col in 0..w {
                let mut acc = layer.bias[d];
                for c in 0..layer.k_in {
                    for orow in -s..=s {
                        let rr = row as isize + orow;
                        if rr < 0 || rr >= h as isize {
                            continue;
                        }
                        for ocol in -s..=s {
                            let cc = col as isize + ocol;
                            if cc < 0 || cc >= w as isize {
                                continue;
                            }
                            let o = ((orow + s) * (2 * s + 1) + (ocol + s)) as usize;
                            debug_assert!(o < win * win || win == 0);
                            acc += layer.kernels[layer.kidx(c, d, o)]
                                * input.get(c, rr as usize, cc as usize);
                        }
                    }
                }
                out.set(d, row, col, acc);
            }
        }
    }
    out
}

/// All intermediate activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub input: FeatureMap,
    /// Pre-activation maps, one per layer.
    pub pre: Vec<FeatureMap>,
    /// Post-activation maps; the last entry is the head output.
    pub post: Vec<FeatureMap>,
}

impl ForwardPass {
    pub fn output(&self) -> &FeatureMap {
        self.post.last().expect("forward pass has at least one layer")
    }

    /// Input of layer `t` (0-based).
    pub fn layer_input(&self, t: usize) -> &FeatureMap {
        if t == 0 {
            &self.input
        } else {
            &self.post[t - 1]
        }
    }
}

/// A toy anchor-based detector: conv head plus anchor geometry and loss
/// family. The final channel count is `slots_per_cell` times the per-anchor
/// output dimension; anchor `a = (row * w + col) * slots + m` reads channel
/// block `m * dim .. (m+1) * dim` at cell `(row, col)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorHead {
    pub kind: HeadKind,
    pub num_classes: usize,
    pub slots_per_cell: usize,
    pub conv: ConvHead,
    pub grid: AnchorGrid,
    pub smooth_l1_beta: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl DetectorHead {
    pub fn hyper(&self) -> LossHyper {
        LossHyper {
            smooth_l1_beta: self.smooth_l1_beta,
            focal_alpha: self.focal_alpha,
            focal_gamma: self.focal_gamma,
        }
    }

    pub fn dim(&self) -> usize {
        self.kind.per_anchor_dim(self.num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        self.conv.validate()?;
        let expected = self.slots_per_cell * self.dim();
        if self.conv.out_channels() != expected {
            return Err(Error::validation(format!(
                "head emits {} channels but {} slots x dim {} = {expected} are required",
                self.conv.out_channels(),
                self.slots_per_cell,
                self.dim()
            )));
        }
        let n_out = self.conv.height * self.conv.width * self.slots_per_cell;
        if self.grid.n_out() != n_out {
            return Err(Error::validation(format!(
                "anchor grid has {} anchors, head produces {n_out}",
                self.grid.n_out()
            )));
        }
        Ok(())
    }

    /// Default desk-scale head: three stride-1 conv layers over an 8x8 grid,
    /// leaky-ReLU hidden activations and an identity output layer.
    pub fn toy<R: Rng>(kind: HeadKind, num_classes: usize, slots: usize, rng: &mut R) -> Self {
        let (h, w) = (8usize, 8usize);
        let cell = 16.0;
        let dim = kind.per_anchor_dim(num_classes);
        let widths = [6usize, 8, 16, slots * dim];
        let mut layers = Vec::new();
        for t in 0..3 {
            let (k_in, k_out) = (widths[t], widths[t + 1]);
            let win = 9;
            let bound = (1.0 / (k_in as f64 * win as f64)).sqrt();
            let kernels = (0..k_in * k_out * win)
                .map(|_| rng.random_range(-bound..bound) * 3.0)
                .collect();
            let bias = (0..k_out).map(|_| rng.random_range(-0.1..0.1)).collect();
            let activation = if t == 2 {
                Activation::Identity
            } else {
                Activation::LeakyRelu { slope: 0.1 }
            };
            layers.push(ConvLayer { k_in, k_out, extent: 1, kernels, bias, activation });
        }
        let priors: Vec<(f64, f64)> =
            (0..slots).map(|m| (10.0 + 8.0 * m as f64, 12.0 + 6.0 * m as f64)).collect();
        let grid = AnchorGrid::regular(h, w, cell, &priors).expect("valid toy grid");
        let hyper = LossHyper::default();
        DetectorHead {
            kind,
            num_classes,
            slots_per_cell: slots,
            conv: ConvHead { layers, height: h, width: w },
            grid,
            smooth_l1_beta: hyper.smooth_l1_beta,
            focal_alpha: hyper.focal_alpha,
            focal_gamma: hyper.focal_gamma,
        }
    }

    pub fn anchor_cell(&self, a: usize) -> (usize, usize, usize) {
        let slots = self.slots_per_cell;
        let cell = a / slots;
        let m = a % slots;
        (cell / self.conv.width, cell % self.conv.width, m)
    }

    /// Gather the per-anchor raw output vectors out of the head output map.
    pub fn extract_raw_outputs(&self, output: &FeatureMap) -> Result<RawOutputs> {
        let dim = self.dim();
        let n_out = self.grid.n_out();
        let mut values = Vec::with_capacity(n_out * dim);
        for a in 0..n_out {
            let (row, col, m) = self.anchor_cell(a);
            for k in 0..dim {
                values.push(output.get(m * dim + k, row, col));
            }
        }
        RawOutputs::new(self.kind, self.num_classes, values)
    }
}

/// Binary mask over the anchor slots selecting the candidate boxes of one
/// scored box.
#[derive(Debug, Clone)]
pub struct CandidateMask {
    pub selected: Vec<bool>,
    pub count: usize,
}

/// Compute the candidate mask of `target` over all output boxes, charging
/// exactly 12 FLOP per pair of boxes to the `mask_iou` phase (the class and
/// score checks are binary and free).
pub fn candidate_mask_counted(
    target: &Instance,
    boxes: &[Instance],
    eps_s: f64,
    eps_iou: f64,
    ledger: &mut FlopLedger,
) -> CandidateMask {
    let mut selected = vec![false; boxes.len()];
    let mut count = 0;
    let tb = &target.bbox;
    for (i, b) in boxes.iter().enumerate() {
        // straight-line 12-FLOP IoU: 3 for the intersection, 3 per area,
        // 2 for the union, 1 for the ratio
        let bb = &b.bbox;
        let dx = (tb.x_max.min(bb.x_max) - tb.x_min.max(bb.x_min)).max(0.0);
        let dy = (tb.y_max.min(bb.y_max) - tb.y_min.max(bb.y_min)).max(0.0);
        let inter = dx * dy;
        let a1 = (tb.x_max - tb.x_min) * (tb.y_max - tb.y_min);
        let a2 = (bb.x_max - bb.x_min) * (bb.y_max - bb.y_min);
        let union = a1 + a2 - inter;
        let v = if union > 0.0 { inter / union } else { 0.0 };
        ledger.add_flops(Phase::MaskIou, 12);
        if b.score >= eps_s && b.class_id == target.class_id && v >= eps_iou {
            selected[i] = true;
            count += 1;
        }
    }
    CandidateMask { selected, count }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradDepth {
    Last,
    LastTwo,
}

/// Gradients of the masked per-box loss w.r.t. the last (and second-to-last)
/// kernel stacks, flattened in kernel-stack layout.
#[derive(Debug, Clone)]
pub struct PerBoxGradient {
    pub grad_last: Vec<f64>,
    pub grad_prev: Option<Vec<f64>>,
}

/// Per-image bundle: one forward pass with its decoded outputs, ready for
/// per-box gradient queries. Read-only once built, so gradient computations
/// for different boxes may run in parallel with private ledgers.
pub struct ImageGradients<'a> {
    pub det: &'a DetectorHead,
    pub fwd: ForwardPass,
    pub raw: RawOutputs,
    pub cache: TransformCache,
    pub boxes: Vec<Instance>,
}

impl<'a> ImageGradients<'a> {
    pub fn new(det: &'a DetectorHead, input: &FeatureMap) -> Result<Self> {
        det.validate()?;
        let fwd = det.conv.forward(input)?;
        let raw = det.extract_raw_outputs(fwd.output())?;
        let (boxes, cache) = transform_outputs_counted(&raw, &det.grid, None)?;
        Ok(ImageGradients { det, fwd, raw, cache, boxes })
    }

    pub fn candidate_mask(
        &self,
        target: &Instance,
        eps_s: f64,
        eps_iou: f64,
        ledger: &mut FlopLedger,
    ) -> CandidateMask {
        candidate_mask_counted(target, &self.boxes, eps_s, eps_iou, ledger)
    }

    /// The masked loss whose gradient [`ImageGradients::per_box_gradient`]
    /// computes; used by finite-difference verification. Assignments,
    /// sampling and the mask are taken as fixed inputs.
    pub fn masked_loss(
        &self,
        raw: &RawOutputs,
        pseudo_gt: &[GroundTruthObject],
        assign: &crate::loss::AssignmentTensors,
        masks: &SampleMasks,
        mask: &CandidateMask,
        part: LossPart,
    ) -> Result<f64> {
        let cache = TransformCache::compute_filtered(raw, &mask.selected);
        let ctx = LossContext {
            raw,
            grid: &self.det.grid,
            gt: pseudo_gt,
            assign,
            masks: Some(masks),
            cache: &cache,
            hyper: self.det.hyper(),
        };
        loss_value(&ctx, part, Some(&mask.selected))
    }

    /// Gradient of the loss part evaluated with the candidate boxes as
    /// prediction and `target` re-encoded as the pseudo ground truth.
    ///
    /// Assumes the forward pass stored in `self`; the ledger is advanced
    /// phase by phase (assignment IoU under `mask_iou`, target encoding
    /// under `postprocess`, derivative under `dloss`, kernel gradients
    /// under `grad_last`/`grad_prev`). An empty candidate set yields zero
    /// gradients and records no dloss cost.
    pub fn per_box_gradient(
        &self,
        target: &Instance,
        mask: &CandidateMask,
        part: LossPart,
        depth: GradDepth,
        rpn_sampling: Option<(usize, u64)>,
        ledger: &mut FlopLedger,
    ) -> Result<PerBoxGradient> {
        let det = self.det;
        let layers = &det.conv.layers;
        let t_last = layers.len() - 1;
        let last = &layers[t_last];
        let prev = &layers[t_last - 1];
        let mut grad_last = vec![0.0; last.kernels.len()];
        let mut grad_prev =
            (depth == GradDepth::LastTwo).then(|| vec![0.0; prev.kernels.len()]);

        if mask.count == 0 {
            return Ok(PerBoxGradient { grad_last, grad_prev });
        }

        let pseudo_gt = vec![GroundTruthObject { bbox: target.bbox, class_id: target.class_id }];
        let cfg = AssignmentConfig::for_head(det.kind);
        let assign = compute_assignments(&pseudo_gt, &det.grid, &cfg, Some(ledger));
        let masks = match rpn_sampling {
            Some((batch, seed)) => SampleMasks::sample(&assign, batch, seed),
            None => SampleMasks::all_eligible(&assign),
        };
        // target re-encoding is forward post-processing, not derivative work
        ledger.add_flops(Phase::Postprocess, 8);

        let ctx = LossContext {
            raw: &self.raw,
            grid: &det.grid,
            gt: &pseudo_gt,
            assign: &assign,
            masks: Some(&masks),
            cache: &self.cache,
            hyper: det.hyper(),
        };
        let dloss = loss_derivative(&ctx, part, Some(&mask.selected), Some(ledger))?;

        // scatter the sparse derivative into feature-map coordinates and
        // fold in the output activation Jacobian
        let dim = det.dim();
        let mut delta: Vec<(usize, usize, usize, f64)> = Vec::new();
        for (&a, comps) in &dloss.entries {
            let (row, col, m) = det.anchor_cell(a);
            for (k, &v) in comps.iter().enumerate() {
                if v == 0.0 {
                    continue;
                }
                let ch = m * dim + k;
                let scaled = match last.activation {
                    Activation::Identity => v,
                    act => {
                        ledger.add_flops(Phase::GradLast, 1);
                        v * act.derivative(self.fwd.pre[t_last].get(ch, row, col))
                    }
                };
                delta.push((ch, row, col, scaled));
            }
        }

        // grad over K_T: for every nonzero delta entry, accumulate the
        // receptive patch of phi_{T-1}
        let phi_prev = self.fwd.layer_input(t_last);
        let s = last.extent as isize;
        let wlen = 2 * last.extent + 1;
        let (h, w) = (phi_prev.height as isize, phi_prev.width as isize);
        let mut flops_last = 0u64;
        for &(d, row, col, v) in &delta {
            for c in 0..last.k_in {
                for orow in -s..=s {
                    let rr = row as isize + orow;
                    if rr < 0 || rr >= h {
                        continue;
                    }
                    for ocol in -s..=s {
                        let cc = col as isize + ocol;
                        if cc < 0 || cc >= w {
                            continue;
                        }
                        let o = ((orow + s) * wlen as isize + (ocol + s)) as usize;
                        grad_last[last.kidx(c, d, o)] +=
                            v * phi_prev.get(c, rr as usize, cc as usize);
                        flops_last += 2;
                    }
                }
            }
        }
        ledger.add_flops(Phase::GradLast, flops_last);

        if let Some(gp) = grad_prev.as_mut() {
            let mut flops_prev = 0u64;
            // backpropagate delta through the last convolution
            let mut dphi = FeatureMap::zeros(prev.k_out, phi_prev.height, phi_prev.width);
            let mut touched = vec![false; dphi.values.len()];
            for &(d, row, col, v) in &delta {
                for c in 0..last.k_in {
                    for orow in -s..=s {
                        let rr = row as isize + orow;
                        if rr < 0 || rr >= h {
                            continue;
                        }
                        for ocol in -s..=s {
                            let cc = col as isize + ocol;
                            if cc < 0 || cc >= w {
                                continue;
                            }
                            let o = ((orow + s) * wlen as isize + (ocol + s)) as usize;
                            let i = dphi.idx(c, rr as usize, cc as usize);
                            dphi.values[i] += v * last.kernels[last.kidx(c, d, o)];
                            touched[i] = true;
                            flops_prev += 2;
                        }
                    }
                }
            }
            // activation Jacobian of layer T-1
            let pre_prev = &self.fwd.pre[t_last - 1];
            for i in 0..dphi.values.len() {
                if touched[i] && dphi.values[i] != 0.0 {
                    match prev.activation {
                        Activation::Identity => {}
                        act => {
                            dphi.values[i] *= act.derivative(pre_prev.values[i]);
                            flops_prev += 1;
                        }
                    }
                }
            }
            // grad over K_{T-1}
            let phi_before = self.fwd.layer_input(t_last - 1);
            let sp = prev.extent as isize;
            let wplen = 2 * prev.extent + 1;
            for c in 0..prev.k_out {
                for row in 0..dphi.height {
                    for col in 0..dphi.width {
                        let i = dphi.idx(c, row, col);
                        if !touched[i] || dphi.values[i] == 0.0 {
                            continue;
                        }
                        let v = dphi.values[i];
                        for e in 0..prev.k_in {
                            for orow in -sp..=sp {
                                let rr = row as isize + orow;
                                if rr < 0 || rr >= h {
                                    continue;
                                }
                                for ocol in -sp..=sp {
                                    let cc = col as isize + ocol;
                                    if cc < 0 || cc >= w {
                                        continue;
                                    }
                                    let o = ((orow + sp) * wplen as isize + (ocol + sp)) as usize;
                                    gp[prev.kidx(e, c, o)] +=
                                        v * phi_before.get(e, rr as usize, cc as usize);
                                    flops_prev += 2;
                                }
                            }
                        }
                    }
                }
            }
            ledger.add_flops(Phase::GradPrev, flops_prev);
        }

        Ok(PerBoxGradient { grad_last, grad_prev })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_kernel_forward_is_identity() {
        // one 1x1 layer, unit kernel, zero bias
        let layer = ConvLayer {
            k_in: 1,
            k_out: 1,
            extent: 0,
            kernels: vec![1.0],
            bias: vec![0.0],
            activation: Activation::Identity,
        };
        let head = ConvHead { layers: vec![layer], height: 3, width: 3 };
        let input =
            FeatureMap::from_values(1, 3, 3, (0..9).map(|v| v as f64).collect()).unwrap();
        let fwd = head.forward(&input).unwrap();
        assert_eq!(fwd.output().values, input.values);
    }

    #[test]
    fn zero_input_yields_activated_bias() {
        let layer = ConvLayer {
            k_in: 2,
            k_out: 1,
            extent: 1,
            kernels: vec![0.5; 2 * 9],
            bias: vec![-2.0],
            activation: Activation::LeakyRelu { slope: 0.1 },
        };
        let head = ConvHead { layers: vec![layer], height: 4, width: 4 };
        let input = FeatureMap::zeros(2, 4, 4);
        let fwd = head.forward(&input).unwrap();
        for v in &fwd.output().values {
            assert!((v - (-0.2)).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_matches_naive_quadruple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let l1 = ConvLayer {
            k_in: 2,
            k_out: 3,
            extent: 1,
            kernels: (0..2 * 3 * 9).map(|_| rng.random_range(-1.0..1.0)).collect(),
            bias: (0..3).map(|_| rng.random_range(-0.5..0.5)).collect(),
            activation: Activation::LeakyRelu { slope: 0.1 },
        };
        let l2 = ConvLayer {
            k_in: 3,
            k_out: 2,
            extent: 1,
            kernels: (0..3 * 2 * 9).map(|_| rng.random_range(-1.0..1.0)).collect(),
            bias: (0..2).map(|_| rng.random_range(-0.5..0.5)).collect(),
            activation: Activation::Identity,
        };
        let head = ConvHead { layers: vec![l1.clone(), l2.clone()], height: 5, width: 5 };
        let input = FeatureMap::random(2, 5, 5, 1.0, &mut rng);
        let fwd = head.forward(&input).unwrap();

        // independent reference: explicit padded loops per layer
        let naive = |layer: &ConvLayer, inp: &FeatureMap| -> FeatureMap {
            let mut out = FeatureMap::zeros(layer.k_out, inp.height, inp.width);
            let s = layer.extent as isize;
            for d in 0..layer.k_out {
                for a in 0..inp.height as isize {
                    for b in 0..inp.width as isize {
                        let mut acc = layer.bias[d];
                        for c in 0..layer.k_in {
                            for p in -s..=s {
                                for q in -s..=s {
                                    let (rr, cc) = (a + p, b + q);
                                    if rr < 0
                                        || cc < 0
                                        || rr >= inp.height as isize
                                        || cc >= inp.width as isize
                                    {
                                        continue;
                                    }
                                    let o = ((p + s) * (2 * s + 1) + (q + s)) as usize;
                                    acc += layer.kernels[layer.kidx(c, d, o)]
                                        * inp.get(c, rr as usize, cc as usize);
                                }
                            }
                        }
                        out.set(d, a as usize, b as usize, layer.activation.apply(acc));
                    }
                }
            }
            out
        };
        let ref1 = naive(&l1, &input);
        let ref2 = naive(&l2, &ref1);
        for (got, want) in fwd.output().values.iter().zip(&ref2.values) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_names_the_layer() {
        let layer = ConvLayer {
            k_in: 3,
            k_out: 1,
            extent: 0,
            kernels: vec![1.0; 3],
            bias: vec![0.0],
            activation: Activation::Identity,
        };
        let head = ConvHead { layers: vec![layer], height: 2, width: 2 };
        let input = FeatureMap::zeros(2, 2, 2);
        let err = head.forward(&input).unwrap_err();
        assert!(err.to_string().contains("layer 1"), "{err}");
    }

    #[test]
    fn empty_candidate_mask_gives_zero_gradient_and_no_dloss_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let det = DetectorHead::toy(HeadKind::Yolo, 3, 2, &mut rng);
        let input = FeatureMap::random(6, 8, 8, 1.0, &mut rng);
        let img = ImageGradients::new(&det, &input).unwrap();
        let target = img.boxes[0].clone();
        let mask = CandidateMask { selected: vec![false; img.boxes.len()], count: 0 };
        let mut ledger = FlopLedger::new();
        let g = img
            .per_box_gradient(&target, &mask, LossPart::Score, GradDepth::LastTwo, None, &mut ledger)
            .unwrap();
        assert!(g.grad_last.iter().all(|&v| v == 0.0));
        assert!(g.grad_prev.unwrap().iter().all(|&v| v == 0.0));
        assert_eq!(ledger.get(Phase::DLoss).flops, 0);
    }

    #[test]
    fn mask_phase_counts_twelve_flops_per_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let det = DetectorHead::toy(HeadKind::Yolo, 3, 2, &mut rng);
        let input = FeatureMap::random(6, 8, 8, 1.0, &mut rng);
        let img = ImageGradients::new(&det, &input).unwrap();
        let mut ledger = FlopLedger::new();
        let _ = img.candidate_mask(&img.boxes[7], 1e-4, 0.5, &mut ledger);
        assert_eq!(ledger.get(Phase::MaskIou).flops, 12 * img.boxes.len() as u64);
    }

    /// Sparse candidate masks stay under the dense-worst-case closed forms
    /// for both kernel stacks.
    #[test]
    fn sparse_mask_ledger_stays_under_the_certified_bounds() {
        use crate::flops::{certified_backprop_step_flops, certified_grad_last_flops};
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let mut checked = 0;
        for seed in 0..40u64 {
            let mut srng = ChaCha8Rng::seed_from_u64(seed + rng.random_range(0..1000));
            let det = DetectorHead::toy(HeadKind::Yolo, 3, 2, &mut srng);
            let input = FeatureMap::random(6, 8, 8, 1.0, &mut srng);
            let img = ImageGradients::new(&det, &input).unwrap();
            let target = img.boxes[srng.random_range(0..img.boxes.len())].clone();
            let mut ledger = FlopLedger::new();
            let mask = img.candidate_mask(&target, 1e-4, 0.5, &mut ledger);
            // the bound presumes genuinely sparse derivatives
            if mask.count == 0 || mask.count > 6 {
                continue;
            }
            let last = det.conv.layers.last().unwrap();
            let prev = &det.conv.layers[det.conv.layers.len() - 2];
            let grad_last_bound = certified_grad_last_flops(
                last.k_out as u64,
                last.k_in as u64,
                last.extent as u64,
            );
            let grad_prev_bound = certified_backprop_step_flops(
                last.k_out as u64,
                prev.k_out as u64,
                prev.k_in as u64,
                last.extent as u64,
                prev.extent as u64,
            );
            for &part in det.kind.parts() {
                let mut ledger = FlopLedger::new();
                let _ = img
                    .per_box_gradient(&target, &mask, part, GradDepth::LastTwo, None, &mut ledger)
                    .unwrap();
                assert!(
                    ledger.get(Phase::GradLast).flops <= grad_last_bound,
                    "seed {seed} {part:?}: grad_last {} > bound {grad_last_bound}",
                    ledger.get(Phase::GradLast).flops
                );
                assert!(
                    ledger.get(Phase::GradPrev).flops <= grad_prev_bound,
                    "seed {seed} {part:?}: grad_prev {} > bound {grad_prev_bound}",
                    ledger.get(Phase::GradPrev).flops
                );
                checked += 1;
            }
        }
        assert!(checked >= 30, "only {checked} sparse scenarios checked");
    }

    /// 1x1 kernels on a 1x1 grid: the last-layer gradient reduces to the
    /// outer product of the loss derivative with the previous activation,
    /// checked here against dense hand-sized matrix algebra.
    #[test]
    fn one_by_one_gradient_equals_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let c = 2;
        let dim = HeadKind::Yolo.per_anchor_dim(c);
        let l1 = ConvLayer {
            k_in: 3,
            k_out: 4,
            extent: 0,
            kernels: (0..12).map(|_| rng.random_range(-1.0..1.0)).collect(),
            bias: vec![0.0; 4],
            activation: Activation::LeakyRelu { slope: 0.1 },
        };
        let l2 = ConvLayer {
            k_in: 4,
            k_out: dim,
            extent: 0,
            kernels: (0..4 * dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            bias: vec![0.0; dim],
            activation: Activation::Identity,
        };
        let grid = AnchorGrid::regular(1, 1, 16.0, &[(10.0, 12.0)]).unwrap();
        let hyper = LossHyper::default();
        let det = DetectorHead {
            kind: HeadKind::Yolo,
            num_classes: c,
            slots_per_cell: 1,
            conv: ConvHead { layers: vec![l1, l2], height: 1, width: 1 },
            grid,
            smooth_l1_beta: hyper.smooth_l1_beta,
            focal_alpha: hyper.focal_alpha,
            focal_gamma: hyper.focal_gamma,
        };
        let input = FeatureMap::random(3, 1, 1, 1.0, &mut rng);
        let img = ImageGradients::new(&det, &input).unwrap();
        let target = img.boxes[0].clone();
        let mut ledger = FlopLedger::new();
        let mask = img.candidate_mask(&target, 0.0, 0.5, &mut ledger);
        assert_eq!(mask.count, 1);
        let g = img
            .per_box_gradient(&target, &mask, LossPart::Score, GradDepth::Last, None, &mut ledger)
            .unwrap();

        // dense oracle: dL/dK2[c][d] = dloss[d] * phi1[c]
        let pseudo = vec![GroundTruthObject { bbox: target.bbox, class_id: target.class_id }];
        let assign = compute_assignments(
            &pseudo,
            &det.grid,
            &AssignmentConfig::for_head(det.kind),
            None,
        );
        let ctx = LossContext {
            raw: &img.raw,
            grid: &det.grid,
            gt: &pseudo,
            assign: &assign,
            masks: None,
            cache: &img.cache,
            hyper: det.hyper(),
        };
        let dl = loss_derivative(&ctx, LossPart::Score, Some(&mask.selected), None).unwrap();
        let phi1 = img.fwd.layer_input(1);
        let last = &det.conv.layers[1];
        for (&a, comps) in &dl.entries {
            assert_eq!(a, 0);
            for (k, &v) in comps.iter().enumerate() {
                for cin in 0..4 {
                    let want = v * phi1.get(cin, 0, 0);
                    let got = g.grad_last[last.kidx(cin, k, 0)];
                    assert!((got - want).abs() < 1e-12);
                }
            }
        }
    }
}
