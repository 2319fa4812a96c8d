//! Certify the cost model: instrumented micro-kernels against the closed
//! forms, affine scaling fits, and the per-head loss-derivative bounds.
//!
//! Run with `cargo run --example flop_certification`.

use detgrad::certify::{
    affine_fit, certification_report, dense_grad_last_microkernel, measure_dloss,
};
use detgrad::flops::{dloss_eval_bound, dloss_flop_bound};
use detgrad::heads::HeadKind;

fn main() {
    println!("{:<17} {:<40} {:>12} {:>12}  status", "check", "parameters", "closed form", "measured");
    for row in certification_report(1) {
        println!(
            "{:<17} {:<40} {:>12} {:>12}  {}",
            row.phase,
            row.params,
            row.closed_form,
            row.measured,
            if row.exact() { "exact" } else { "MISMATCH" }
        );
    }

    // scaling: the last-layer gradient cost is affine in k_T * k_{T-1}
    let ks = [4usize, 8, 16, 32];
    let xs: Vec<f64> = ks.iter().map(|&k| (k * 3) as f64).collect();
    let ys: Vec<f64> = ks.iter().map(|&k| dense_grad_last_microkernel(k, 3, 1, 2).1 as f64).collect();
    let (slope, intercept, r2) = affine_fit(&xs, &ys);
    println!("\ngrad_last scaling in k_T*k_prev: slope {slope:.1}, intercept {intercept:.1}, r^2 {r2:.9}");

    println!("\nloss-derivative cost against the per-head bounds (all parts, dense mask):");
    for c in [1usize, 3, 10] {
        for kind in [HeadKind::Yolo, HeadKind::Rpn, HeadKind::Roi, HeadKind::Retina] {
            let m = measure_dloss(kind, c, 3).expect("measurement");
            println!(
                "  {:<7} C={:<2} n_out={:<4} measured {:>6} FLOP / {:>4} evals, bounds {:>6} / {:>4}",
                kind.name(),
                c,
                m.n_out,
                m.flops,
                m.evals,
                dloss_flop_bound(kind, c as u64, m.n_out),
                dloss_eval_bound(kind, c as u64, m.n_out)
            );
        }
    }
}
