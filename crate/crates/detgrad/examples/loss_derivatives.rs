//! The four loss families and their closed-form derivatives: anchor
//! assignment, per-part loss values and the sparse derivative structure,
//! checked on the spot against central finite differences.
//!
//! Run with `cargo run --example loss_derivatives`.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use detgrad::detection::{BoundingBox, GroundTruthObject};
use detgrad::heads::{AnchorGrid, HeadKind, RawOutputs, TransformCache};
use detgrad::loss::{
    compute_assignments, loss_derivative, loss_value, AssignmentConfig, LossContext, LossHyper,
    SampleMasks,
};

fn main() {
    let grid = AnchorGrid::regular(4, 4, 8.0, &[(6.0, 6.0), (10.0, 14.0)]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let classes = 3;
    let gt = vec![
        GroundTruthObject { bbox: BoundingBox::from_center(12.0, 12.0, 7.0, 6.5), class_id: 2 },
        GroundTruthObject { bbox: BoundingBox::from_center(24.0, 20.0, 11.0, 13.0), class_id: 1 },
    ];

    for head in [HeadKind::Yolo, HeadKind::Rpn, HeadKind::Roi, HeadKind::Retina] {
        let dim = head.per_anchor_dim(classes);
        let values: Vec<f64> =
            (0..grid.n_out() * dim).map(|_| rng.random_range(-1.5..1.5)).collect();
        let raw = RawOutputs::new(head, classes, values).unwrap();
        let cfg = AssignmentConfig::for_head(head);
        let assign = compute_assignments(&gt, &grid, &cfg, None);
        let masks = SampleMasks::sample(&assign, 256, 0);
        let cache = TransformCache::compute(&raw);
        let ctx = LossContext {
            raw: &raw,
            grid: &grid,
            gt: &gt,
            assign: &assign,
            masks: Some(&masks),
            cache: &cache,
            hyper: LossHyper::default(),
        };

        println!(
            "{:>7}: eps+ {:.1} eps- {:.1}, {} obj pairs, {} background anchors",
            head.name(),
            cfg.eps_pos,
            cfg.eps_neg,
            assign.n_obj_entries,
            assign.noobj.iter().filter(|&&b| b).count()
        );
        for &part in head.parts() {
            let value = loss_value(&ctx, part, None).unwrap();
            let deriv = loss_derivative(&ctx, part, None, None).unwrap();
            // spot finite-difference check on the first nonzero entry
            let probe = deriv
                .entries
                .iter()
                .flat_map(|(&a, comps)| {
                    comps.iter().enumerate().map(move |(k, &v)| (a, k, v))
                })
                .find(|&(_, _, v)| v.abs() > 1e-6);
            let fd_note = match probe {
                Some((a, k, v)) => {
                    let h = 1e-6;
                    let eval = |delta: f64| {
                        let mut r = raw.clone();
                        r.anchor_mut(a)[k] += delta;
                        let c = TransformCache::compute(&r);
                        let ctx2 = LossContext { raw: &r, cache: &c, ..ctx };
                        loss_value(&ctx2, part, None).unwrap()
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    format!("d/dtau[{a},{k}] = {v:.5} (finite diff {fd:.5})")
                }
                None => "all-zero derivative".to_string(),
            };
            println!(
                "  {:>5}: value {:>9.4}, {} anchors carry gradient, {}",
                part.name(),
                value,
                deriv.entries.len(),
                fd_note
            );
        }
    }
}
