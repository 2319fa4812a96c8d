//! MC-dropout uncertainty on the toy head: thirty dropout samples of the
//! penultimate activation, per-component spread of one detection's decoded
//! outputs, and the residual-pass cost against its closed form.
//!
//! Run with `cargo run --example mc_dropout`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use detgrad::conv::{DetectorHead, FeatureMap};
use detgrad::dropout::{mc_dropout_samples, per_anchor_sample_stats};
use detgrad::features::{apply_map, ScalarMap};
use detgrad::flops::{certified_dropout_forward_flops, FlopLedger, Phase};
use detgrad::heads::{transform_anchor, HeadKind};

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let det = DetectorHead::toy(HeadKind::Yolo, 3, 2, &mut rng);
    let input = FeatureMap::random(det.conv.layers[0].k_in, 8, 8, 1.0, &mut rng);
    let fwd = det.conv.forward(&input).expect("forward");
    let t_last = det.conv.layers.len() - 1;

    let mut ledger = FlopLedger::new();
    let samples =
        mc_dropout_samples(&det.conv, fwd.layer_input(t_last), 0.5, 30, 99, &mut ledger)
            .expect("dropout samples");
    println!("drew {} dropout samples at rate 0.5", samples.len());

    let last = det.conv.layers.last().unwrap();
    let n_t = (last.k_out * det.conv.height * det.conv.width) as u64;
    let per_sample = certified_dropout_forward_flops(n_t, last.k_in as u64, last.extent as u64);
    println!(
        "residual pass cost: measured {} FLOP, closed form {} x 30 = {}",
        ledger.get(Phase::DropoutForward).flops,
        per_sample,
        per_sample * 30
    );

    // per-component spread of one anchor's decoded outputs across samples
    let anchor = 27usize;
    let per_sample_components: Vec<Vec<f64>> = samples
        .iter()
        .map(|map| {
            let raw = det.extract_raw_outputs(map).unwrap();
            let tb = transform_anchor(&raw, &det.grid, anchor).unwrap();
            let mut comps =
                vec![tb.bbox.x_min, tb.bbox.y_min, tb.bbox.x_max, tb.bbox.y_max, tb.score];
            comps.extend(tb.probs);
            comps
        })
        .collect();
    let (mean, std) = per_anchor_sample_stats(&per_sample_components);
    println!("\nanchor {anchor}: decoded component spread over samples");
    let names = ["x_min", "y_min", "x_max", "y_max", "score", "p_1", "p_2", "p_3"];
    for (i, name) in names.iter().enumerate() {
        println!("  {:>6}: mean {:>9.4}  std {:>8.4}", name, mean[i], std[i]);
    }
    println!(
        "\nsummary features of the std vector: norm2 {:.4}, max {:.4}",
        apply_map(ScalarMap::Norm2, &std).unwrap(),
        apply_map(ScalarMap::Max, &std).unwrap()
    );

    // determinism: same seed, same bits
    let mut l2 = FlopLedger::new();
    let again =
        mc_dropout_samples(&det.conv, fwd.layer_input(t_last), 0.5, 30, 99, &mut l2).unwrap();
    let identical = samples
        .iter()
        .zip(&again)
        .all(|(a, b)| a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits()));
    println!("rerun with the same seed is bit-identical: {identical}");
}
