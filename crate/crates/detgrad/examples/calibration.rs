//! Confidence calibration: reliability bins and the three calibration
//! errors for the deliberately miscalibrated detector score against the
//! out-of-fold meta-classifier probabilities.
//!
//! Run with `cargo run --release --example calibration`.

use detgrad::calibration::{bin_reliability, calibration_errors, reliability_diagram_data};
use detgrad::cv::{cross_validate, MetaTask};
use detgrad::features::FeatureSource;
use detgrad::gbt::GbtConfig;
use detgrad::synth::{generate_synthetic_corpus, SyntheticCorpusConfig};

fn main() {
    let cfg = SyntheticCorpusConfig {
        n_images: 300,
        score_shift: 2.6, // push scores high: overconfident by construction
        seed: 5,
        ..Default::default()
    };
    let (_, table) = generate_synthetic_corpus(&cfg).expect("corpus");
    let labels: Vec<bool> = table.rows.iter().map(|r| r.label_tpfp == 1).collect();
    let scores: Vec<f64> = table.rows.iter().map(|r| r.score).collect();

    let (_, oof) = cross_validate(
        &GbtConfig::classifier(),
        &table,
        FeatureSource::G,
        MetaTask::Classify,
        10,
        5,
    )
    .expect("cv");

    for (name, conf) in [("score", &scores), ("meta:G", &oof)] {
        let bins = bin_reliability(conf, &labels, 10).unwrap();
        let e = calibration_errors(&bins).unwrap();
        println!("{name}: MCE {:.4}  ACE {:.4}  ECE {:.4}", e.mce, e.ace, e.ece);
        println!("  {:>10} {:>7} {:>7} {:>7}", "bin", "count", "conf", "acc");
        for r in reliability_diagram_data(&bins) {
            if r.count == 0 {
                continue;
            }
            println!(
                "  ({:.1},{:.1}] {:>7} {:>7.3} {:>7.3}",
                r.bin_low, r.bin_high, r.count, r.conf, r.acc
            );
        }
    }
    println!("\na calibrated model sits on the diagonal conf == acc; the raw score sits far above it");
}
