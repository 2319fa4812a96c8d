//! Image-wise k-fold cross validation of the meta models: folds never split
//! an image's boxes, metrics are computed on held-out boxes only, and
//! out-of-fold predictions are retained for calibration and fusion.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{assemble_features, FeatureSource, FeatureTable};
use crate::gbt::{predict, train, GbtConfig, Objective};
use crate::metrics::{auroc, average_precision, r_squared};

/// Disjoint image-id folds covering all images.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvPlan {
    pub folds: Vec<Vec<String>>,
    pub seed: u64,
}

impl CvPlan {
    pub fn image_wise(image_ids: &[String], k: usize, seed: u64) -> Result<Self> {
        let mut unique: Vec<String> = image_ids.to_vec();
        unique.sort();
        unique.dedup();
        if unique.len() < k {
            return Err(Error::validation(format!(
                "{} images are too few for {k}-fold cross validation",
                unique.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..unique.len()).rev() {
            let j = rng.random_range(0..=i);
            unique.swap(i, j);
        }
        let mut folds = vec![Vec::new(); k];
        for (i, id) in unique.into_iter().enumerate() {
            folds[i % k].push(id);
        }
        Ok(CvPlan { folds, seed })
    }

    pub fn fold_of(&self) -> BTreeMap<&str, usize> {
        let mut map = BTreeMap::new();
        for (f, ids) in self.folds.iter().enumerate() {
            for id in ids {
                map.insert(id.as_str(), f);
            }
        }
        map
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetaTask {
    Classify,
    Regress,
}

impl MetaTask {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "classify" => Ok(MetaTask::Classify),
            "regress" => Ok(MetaTask::Regress),
            other => Err(Error::validation(format!("unknown task '{other}'"))),
        }
    }

    pub fn objective(self) -> Objective {
        match self {
            MetaTask::Classify => Objective::Logistic,
            MetaTask::Regress => Objective::SquaredError,
        }
    }
}

/// Held-out metrics of one fold. For classification `primary` is AuROC and
/// `secondary` is average precision; for regression `primary` is R^2.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub n_test: usize,
    pub primary: f64,
    pub secondary: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvReport {
    pub source: String,
    pub task: MetaTask,
    pub per_fold: Vec<FoldMetrics>,
    pub mean_primary: f64,
    pub std_primary: f64,
    pub mean_secondary: Option<f64>,
    pub std_secondary: Option<f64>,
}

/// Cross-validated evaluation returning the report and the out-of-fold
/// prediction for every row of the table (aligned indices).
pub fn cross_validate(
    config: &GbtConfig,
    table: &FeatureTable,
    source: FeatureSource,
    task: MetaTask,
    k: usize,
    seed: u64,
) -> Result<(CvReport, Vec<f64>)> {
    let matrix = assemble_features(table, source)?;
    let image_ids: Vec<String> = table.rows.iter().map(|r| r.image_id.clone()).collect();
    let plan = CvPlan::image_wise(&image_ids, k, seed)?;
    let fold_of = plan.fold_of();
    let row_fold: Vec<usize> =
        table.rows.iter().map(|r| fold_of[r.image_id.as_str()]).collect();

    let targets: Vec<f64> = table
        .rows
        .iter()
        .map(|r| match task {
            MetaTask::Classify => r.label_tpfp as f64,
            MetaTask::Regress => r.target_iou,
        })
        .collect();

    let config = GbtConfig { objective: task.objective(), ..config.clone() };
    let mut oof = vec![f64::NAN; table.rows.len()];
    let mut per_fold = Vec::with_capacity(k);
    for fold in 0..k {
        let train_rows: Vec<Vec<f64>> = matrix
            .rows
            .iter()
            .zip(&row_fold)
            .filter(|(_, &f)| f != fold)
            .map(|(r, _)| r.clone())
            .collect();
        let train_targets: Vec<f64> = targets
            .iter()
            .zip(&row_fold)
            .filter(|(_, &f)| f != fold)
            .map(|(t, _)| *t)
            .collect();
        let test_idx: Vec<usize> =
            (0..table.rows.len()).filter(|&i| row_fold[i] == fold).collect();
        if test_idx.is_empty() {
            return Err(Error::validation(format!("fold {fold} holds no boxes")));
        }
        let (model, _) = train(&config, &train_rows, &train_targets, &matrix.schema_id)?;
        let test_rows: Vec<Vec<f64>> =
            test_idx.iter().map(|&i| matrix.rows[i].clone()).collect();
        let preds = predict(&model, &test_rows)?;
        for (&i, &p) in test_idx.iter().zip(&preds) {
            oof[i] = p;
        }
        let test_targets: Vec<f64> = test_idx.iter().map(|&i| targets[i]).collect();
        let (primary, secondary) = match task {
            MetaTask::Classify => (
                auroc(&preds, &test_targets)?,
                Some(average_precision(&preds, &test_targets)?),
            ),
            MetaTask::Regress => (r_squared(&preds, &test_targets)?, None),
        };
        per_fold.push(FoldMetrics { fold, n_test: test_idx.len(), primary, secondary });
    }

    let mean_std = |xs: &[f64]| {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let primaries: Vec<f64> = per_fold.iter().map(|f| f.primary).collect();
    let (mean_primary, std_primary) = mean_std(&primaries);
    let (mean_secondary, std_secondary) = if task == MetaTask::Classify {
        let secondaries: Vec<f64> = per_fold.iter().map(|f| f.secondary.unwrap()).collect();
        let (m, s) = mean_std(&secondaries);
        (Some(m), Some(s))
    } else {
        (None, None)
    };

    Ok((
        CvReport {
            source: source.name().to_string(),
            task,
            per_fold,
            mean_primary,
            std_primary,
            mean_secondary,
            std_secondary,
        },
        oof,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureRow;

    fn table_with(images: usize, boxes_per_image: usize, mut f: impl FnMut(usize, usize) -> (f64, u8)) -> FeatureTable {
        let mut rows = Vec::new();
        for i in 0..images {
            for b in 0..boxes_per_image {
                let (feat, label) = f(i, b);
                rows.push(FeatureRow {
                    image_id: format!("img{i:03}"),
                    box_index: b,
                    score: 0.5,
                    label_tpfp: label,
                    target_iou: if label == 1 { 0.8 } else { 0.1 },
                    values: vec![feat],
                });
            }
        }
        FeatureTable { schema_id: "test.v1".into(), columns: vec!["loc.last.norm2".into()], rows }
    }

    #[test]
    fn folds_partition_images_and_never_split_boxes() {
        let ids: Vec<String> = (0..37).map(|i| format!("img{i}")).collect();
        let plan = CvPlan::image_wise(&ids, 10, 3).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for fold in &plan.folds {
            for id in fold {
                assert!(seen.insert(id.clone()), "image {id} in two folds");
            }
        }
        assert_eq!(seen.len(), 37);
    }

    #[test]
    fn too_few_images_is_rejected() {
        let ids: Vec<String> = (0..5).map(|i| format!("img{i}")).collect();
        assert!(CvPlan::image_wise(&ids, 10, 0).is_err());
    }

    #[test]
    fn duplicated_identical_images_give_zero_fold_std() {
        // every image has an identical, separable box population
        let table = table_with(20, 6, |_, b| {
            let label = (b % 2) as u8;
            (label as f64 * 2.0 + (b / 2) as f64 * 0.01, label)
        });
        let (report, oof) = cross_validate(
            &GbtConfig::classifier(),
            &table,
            FeatureSource::G,
            MetaTask::Classify,
            10,
            1,
        )
        .unwrap();
        assert!(report.std_primary < 1e-12);
        assert!(report.mean_primary > 0.99);
        assert!(oof.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn shuffled_labels_sit_near_chance() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(14);
        let table = table_with(60, 8, |_, _| {
            (rng.random_range(-1.0..1.0), rng.random_range(0..2) as u8)
        });
        let (report, _) = cross_validate(
            &GbtConfig::classifier(),
            &table,
            FeatureSource::G,
            MetaTask::Classify,
            10,
            2,
        )
        .unwrap();
        assert!((report.mean_primary - 0.5).abs() < 0.06, "AuROC {}", report.mean_primary);
    }
}
