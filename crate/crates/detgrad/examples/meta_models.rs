//! Meta classification and meta regression on the injected-signal corpus:
//! 10-fold image-wise cross validation of gradient-boosted models over
//! different uncertainty feature sets.
//!
//! Run with `cargo run --release --example meta_models`.

use detgrad::cv::{cross_validate, MetaTask};
use detgrad::features::FeatureSource;
use detgrad::gbt::GbtConfig;
use detgrad::synth::{generate_synthetic_corpus, SyntheticCorpusConfig};

fn main() {
    let cfg = SyntheticCorpusConfig { n_images: 150, seed: 1, ..Default::default() };
    let (_, table) = generate_synthetic_corpus(&cfg).expect("corpus");
    println!(
        "injected corpus: {} boxes, Bayes AuROC of the gradient block {:.4}",
        table.rows.len(),
        cfg.bayes_auroc_gradient_block()
    );

    let sources = [
        FeatureSource::Score,
        FeatureSource::Norms2,
        FeatureSource::Norms12,
        FeatureSource::Mc,
        FeatureSource::G,
        FeatureSource::GMc,
    ];

    println!("\nmeta classification (10-fold cv, std in parentheses):");
    println!("{:>8} {:>18} {:>18}", "source", "AuROC", "AP");
    for source in sources {
        let (report, _) = cross_validate(
            &GbtConfig::classifier(),
            &table,
            source,
            MetaTask::Classify,
            10,
            1,
        )
        .expect("cv");
        println!(
            "{:>8} {:>9.4} ({:.4}) {:>9.4} ({:.4})",
            report.source,
            report.mean_primary,
            report.std_primary,
            report.mean_secondary.unwrap(),
            report.std_secondary.unwrap()
        );
    }

    println!("\nmeta regression (10-fold cv, std in parentheses):");
    println!("{:>8} {:>18}", "source", "R^2");
    for source in sources {
        let (report, _) = cross_validate(
            &GbtConfig::regressor(),
            &table,
            source,
            MetaTask::Regress,
            10,
            1,
        )
        .expect("cv");
        println!(
            "{:>8} {:>9.4} ({:.4})",
            report.source, report.mean_primary, report.std_primary
        );
    }
}
