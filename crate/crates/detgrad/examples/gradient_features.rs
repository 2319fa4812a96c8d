//! Per-box gradient uncertainty end to end: run a toy conv head forward,
//! pick a detection, build its candidate mask, backpropagate the masked
//! loss into the last two kernel stacks and collapse the gradients into
//! the six scalar maps.
//!
//! Run with `cargo run --example gradient_features`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use detgrad::conv::{DetectorHead, FeatureMap, GradDepth, ImageGradients};
use detgrad::detection::candidate_set;
use detgrad::features::{apply_map, ALL_MAPS};
use detgrad::flops::{FlopLedger, ALL_PHASES};
use detgrad::heads::HeadKind;

/// The detection in the densest candidate cluster whose pseudo ground
/// truth claims an anchor of another cluster member, if any.
fn pick_target(
    det: &DetectorHead,
    img: &ImageGradients,
) -> Option<detgrad::detection::Instance> {
    let mut ranked: Vec<&detgrad::detection::Instance> = img.boxes.iter().collect();
    ranked.sort_by(|a, b| {
        let ca = candidate_set(a, &img.boxes, 1e-4, 0.5).len();
        let cb = candidate_set(b, &img.boxes, 1e-4, 0.5).len();
        cb.cmp(&ca).then(b.score.partial_cmp(&a.score).unwrap())
    });
    ranked
        .into_iter()
        .find(|b| {
            let pseudo = vec![detgrad::detection::GroundTruthObject {
                bbox: b.bbox,
                class_id: b.class_id,
            }];
            let assign = detgrad::loss::compute_assignments(
                &pseudo,
                &det.grid,
                &detgrad::loss::AssignmentConfig::for_head(det.kind),
                None,
            );
            candidate_set(b, &img.boxes, 1e-4, 0.5)
                .iter()
                .any(|&i| i != b.anchor_index && assign.any_obj(i))
        })
        .cloned()
}

fn main() {
    // scan seeds until a scene offers a detection with an interesting
    // candidate cluster (one whose pseudo ground truth claims an anchor
    // of another cluster member)
    let (det, input, target) = (42u64..)
        .find_map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let det = DetectorHead::toy(HeadKind::Yolo, 3, 2, &mut rng);
            let input = FeatureMap::random(det.conv.layers[0].k_in, 8, 8, 1.0, &mut rng);
            let img = ImageGradients::new(&det, &input).ok()?;
            let target = pick_target(&det, &img)?;
            Some((det.clone(), input, target))
        })
        .expect("a usable scene exists");
    let img = ImageGradients::new(&det, &input).expect("forward pass");
    println!(
        "toy YOLO-style head: {} anchors, per-anchor dimension {}",
        det.grid.n_out(),
        det.dim()
    );

    println!(
        "query box: anchor {} class {} score {:.3}",
        target.anchor_index, target.class_id, target.score
    );

    let mut ledger = FlopLedger::new();
    let mask = img.candidate_mask(&target, 1e-4, 0.5, &mut ledger);
    println!("candidate mask selects {} of {} boxes", mask.count, img.boxes.len());

    println!("\nsix maps per loss part and layer:");
    println!("{:>7} {:>5}  {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}", "part", "layer", "min", "max", "mean", "std", "norm1", "norm2");
    for &part in det.kind.parts() {
        let g = img
            .per_box_gradient(&target, &mask, part, GradDepth::LastTwo, None, &mut ledger)
            .expect("gradient");
        for (layer, values) in [("last", &g.grad_last), ("prev", g.grad_prev.as_ref().unwrap())] {
            print!("{:>7} {:>5} ", part.name(), layer);
            for map in ALL_MAPS {
                print!(" {:>9.4}", apply_map(map, values).unwrap());
            }
            println!();
        }
    }

    println!("\ninstrumented cost of this query:");
    for phase in ALL_PHASES {
        let c = ledger.get(phase);
        if c.flops > 0 || c.elementary_evals > 0 {
            println!("  {:>16}: {:>8} FLOP, {:>4} elementary evals", phase.name(), c.flops, c.elementary_evals);
        }
    }
}
