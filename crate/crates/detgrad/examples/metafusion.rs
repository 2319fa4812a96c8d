//! Decision fusion: replace the score threshold of the detection pipeline
//! with a meta-classifier probability threshold and sweep the decision
//! threshold, comparing mAP curves and FP/FN trade-offs.
//!
//! Run with `cargo run --release --example metafusion`.

use detgrad::cv::{cross_validate, MetaTask};
use detgrad::features::FeatureSource;
use detgrad::gbt::GbtConfig;
use detgrad::pipeline::{fpfn_sweep, map_sweep, MetaProbs, PipelineConfig, PipelineMode};
use detgrad::synth::{generate_synthetic_corpus, SyntheticCorpusConfig};

fn main() {
    let cfg = SyntheticCorpusConfig { n_images: 150, seed: 8, ..Default::default() };
    let (samples, table) = generate_synthetic_corpus(&cfg).expect("corpus");

    // out-of-fold meta probabilities for every post-NMS box
    let (report, oof) = cross_validate(
        &GbtConfig::classifier(),
        &table,
        FeatureSource::G,
        MetaTask::Classify,
        10,
        8,
    )
    .expect("cv");
    println!("meta classifier (G): held-out AuROC {:.4}", report.mean_primary);
    let mut probs = MetaProbs::new();
    for (r, &p) in table.rows.iter().zip(&oof) {
        probs.insert((r.image_id.clone(), r.box_index), p);
    }

    let pcfg = PipelineConfig::default();
    let grid: Vec<f64> = (0..=40).map(|i| i as f64 * 0.025).collect();
    let base =
        map_sweep(PipelineMode::Baseline, "score", &samples, None, &grid, &pcfg).unwrap();
    let meta =
        map_sweep(PipelineMode::MetaFusion, "meta:G", &samples, Some(&probs), &grid, &pcfg)
            .unwrap();

    println!("\nmAP over the decision threshold (every fourth point):");
    println!("{:>10} {:>10} {:>10}", "threshold", "score", "meta:G");
    for (b, m) in base.points.iter().zip(&meta.points).step_by(4) {
        println!(
            "{:>10.3} {:>10.4} {:>10.4}",
            b.threshold,
            b.map.unwrap(),
            m.map.unwrap()
        );
    }

    // FP/FN trade-off for one class on a fine grid
    let fine: Vec<f64> = (0..=1000).map(|i| i as f64 * 1e-3).collect();
    println!("\nbest total error (FP+FN) for class 1 over a fine sweep:");
    for (mode, name, p) in [
        (PipelineMode::Baseline, "score", None),
        (PipelineMode::MetaFusion, "meta:G", Some(&probs)),
    ] {
        let sweep = fpfn_sweep(mode, name, &samples, p, 1, &fine, &pcfg).unwrap();
        let best = sweep
            .points
            .iter()
            .min_by_key(|q| q.false_positives.unwrap() + q.false_negatives.unwrap())
            .unwrap();
        println!(
            "  {:>7}: {} FP + {} FN at threshold {:.3}",
            name,
            best.false_positives.unwrap(),
            best.false_negatives.unwrap(),
            best.threshold
        );
    }
}
