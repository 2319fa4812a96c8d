//! Exact accounting of scalar arithmetic, separated from elementary-function
//! evaluations, used to certify the cost model of the gradient engine.
//!
//! One multiply, one add/subtract, or one fused scale each count a single
//! FLOP. Elementary functions (exp, log, sigmoid, pow) count in
//! `elementary_evals` and never in `flops`. Binary comparisons are free.

use serde::{Deserialize, Serialize};

use crate::heads::HeadKind;

/// Phases of the per-box gradient computation tracked separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Pairwise IoU work for candidate masks and anchor assignment.
    MaskIou,
    /// Loss derivative w.r.t. the raw head outputs.
    DLoss,
    /// Last-layer kernel gradient.
    GradLast,
    /// Backpropagation step to the previous kernel stack.
    GradPrev,
    /// Residual forward pass of one MC-dropout sample.
    DropoutForward,
    /// Output transformations (raw outputs to boxes/scores/probs).
    Postprocess,
}

pub const ALL_PHASES: [Phase; 6] = [
    Phase::MaskIou,
    Phase::DLoss,
    Phase::GradLast,
    Phase::GradPrev,
    Phase::DropoutForward,
    Phase::Postprocess,
];

impl Phase {
    fn index(self) -> usize {
        match self {
            Phase::MaskIou => 0,
            Phase::DLoss => 1,
            Phase::GradLast => 2,
            Phase::GradPrev => 3,
            Phase::DropoutForward => 4,
            Phase::Postprocess => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::MaskIou => "mask_iou",
            Phase::DLoss => "dloss",
            Phase::GradLast => "grad_last",
            Phase::GradPrev => "grad_prev",
            Phase::DropoutForward => "dropout_forward",
            Phase::Postprocess => "postprocess",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseCount {
    pub flops: u64,
    pub elementary_evals: u64,
}

/// Monotone per-phase operation counters. Merging two ledgers is
/// component-wise addition.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopLedger {
    counts: [PhaseCount; 6],
}

impl FlopLedger {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add_flops(&mut self, phase: Phase, n: u64) {
        self.counts[phase.index()].flops += n;
    }

    #[inline]
    pub fn add_evals(&mut self, phase: Phase, n: u64) {
        self.counts[phase.index()].elementary_evals += n;
    }

    pub fn get(&self, phase: Phase) -> PhaseCount {
        self.counts[phase.index()]
    }

    pub fn merge(&mut self, other: &FlopLedger) {
        for p in ALL_PHASES {
            self.counts[p.index()].flops += other.counts[p.index()].flops;
            self.counts[p.index()].elementary_evals += other.counts[p.index()].elementary_evals;
        }
    }

    pub fn total_flops(&self) -> u64 {
        self.counts.iter().map(|c| c.flops).sum()
    }
}

/// FLOP count of the last-layer kernel gradient on the dense worst case:
/// `[2 k_T (2 s_T + 1)^2 - 1] * [k_{T-1} (2 s_T + 1)^2]`.
pub fn certified_grad_last_flops(k_t: u64, k_prev: u64, s_t: u64) -> u64 {
    let win = (2 * s_t + 1) * (2 * s_t + 1);
    (2 * k_t * win - 1) * (k_prev * win)
}

/// FLOP count of one backpropagation step from layer `t+1` down to the
/// kernel stack of layer `t`.
pub fn certified_backprop_step_flops(
    k_next: u64,
    k_t: u64,
    k_prev: u64,
    s_next: u64,
    s_t: u64,
) -> u64 {
    let win_next = (2 * s_next + 1) * (2 * s_next + 1);
    let win_t = (2 * s_t + 1) * (2 * s_t + 1);
    (2 * k_next * win_next - 1) * (k_t * win_t) + (2 * k_t * win_t - 1) * (k_prev * win_t)
}

/// FLOP count of the residual forward pass of one dropout sample:
/// `2 n_T k_{T-1} (2 s_T + 1)^2 - 1 + n_T`.
pub fn certified_dropout_forward_flops(n_t: u64, k_prev: u64, s_t: u64) -> u64 {
    let win = (2 * s_t + 1) * (2 * s_t + 1);
    2 * n_t * k_prev * win - 1 + n_t
}

/// FLOP count of computing one candidate mask over `n_t` boxes
/// (12 FLOP per pair of boxes).
pub fn certified_mask_flops(n_t: u64) -> u64 {
    12 * n_t
}

/// Upper bound on the FLOP performed while computing the loss derivative
/// w.r.t. all `n_out` raw anchor outputs, per head kind.
pub fn dloss_flop_bound(head: HeadKind, num_classes: u64, n_out: u64) -> u64 {
    let c = num_classes;
    match head {
        HeadKind::Yolo => (9 + c) * n_out,
        HeadKind::Rpn => 10 * n_out,
        HeadKind::Roi => (2 + 2 * c) * n_out,
        HeadKind::Retina => (18 + 11 * c) * n_out,
    }
}

/// Upper bound on elementary-function evaluations in the loss-derivative
/// path. Zero except for the focal classification loss.
pub fn dloss_eval_bound(head: HeadKind, num_classes: u64, n_out: u64) -> u64 {
    match head {
        HeadKind::Retina => 2 * (1 + num_classes) * n_out,
        _ => 0,
    }
}

/// Upper bound on the FLOP of the output transformations applied to
/// `n_samp` dropout samples.
pub fn mc_postprocess_flop_bound(head: HeadKind, num_classes: u64, n_out: u64, n_samp: u64) -> u64 {
    let c = num_classes;
    match head {
        HeadKind::Yolo | HeadKind::Retina => 8 * n_out * n_samp,
        HeadKind::Rpn | HeadKind::Roi => (9 + 2 * c) * n_out * n_samp,
    }
}

/// Upper bound on elementary evaluations of the dropout post-processing.
pub fn mc_postprocess_eval_bound(head: HeadKind, num_classes: u64, n_out: u64, n_samp: u64) -> u64 {
    let c = num_classes;
    match head {
        HeadKind::Yolo => (5 + c) * n_out * n_samp,
        HeadKind::Rpn | HeadKind::Roi | HeadKind::Retina => (3 + c) * n_out * n_samp,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_last_closed_form_examples() {
        // (2*4*9 - 1) * (3*9) = 71 * 27
        assert_eq!(certified_grad_last_flops(4, 3, 1), 1917);
        assert_eq!(certified_grad_last_flops(1, 1, 0), 1);
    }

    #[test]
    fn dropout_closed_form_example() {
        assert_eq!(certified_dropout_forward_flops(100, 3, 1), 5499);
    }

    #[test]
    fn mask_closed_form_example() {
        assert_eq!(certified_mask_flops(50), 600);
    }

    #[test]
    fn ledger_merge_is_componentwise_addition() {
        let mut a = FlopLedger::new();
        a.add_flops(Phase::DLoss, 3);
        a.add_evals(Phase::DLoss, 1);
        let mut b = FlopLedger::new();
        b.add_flops(Phase::DLoss, 4);
        b.add_flops(Phase::GradLast, 7);
        a.merge(&b);
        assert_eq!(a.get(Phase::DLoss), PhaseCount { flops: 7, elementary_evals: 1 });
        assert_eq!(a.get(Phase::GradLast).flops, 7);
    }
}
