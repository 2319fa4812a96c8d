//! Collapse per-box gradients into scalar uncertainty features via the six
//! maps {min, max, mean, std, norm1, norm2}, and assemble per-box feature
//! tables for the meta models.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{HeadKind, LossPart};

/// The six scalar maps; `std` is the population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalarMap {
    Min,
    Max,
    Mean,
    Std,
    Norm1,
    Norm2,
}

pub const ALL_MAPS: [ScalarMap; 6] = [
    ScalarMap::Min,
    ScalarMap::Max,
    ScalarMap::Mean,
    ScalarMap::Std,
    ScalarMap::Norm1,
    ScalarMap::Norm2,
];

impl ScalarMap {
    pub fn name(self) -> &'static str {
        match self {
            ScalarMap::Min => "min",
            ScalarMap::Max => "max",
            ScalarMap::Mean => "mean",
            ScalarMap::Std => "std",
            ScalarMap::Norm1 => "norm1",
            ScalarMap::Norm2 => "norm2",
        }
    }
}

/// Apply one scalar map to a flat gradient vector.
pub fn apply_map(map: ScalarMap, g: &[f64]) -> Result<f64> {
    if g.is_empty() {
        return Err(Error::validation(format!(
            "cannot compute feature '{}' of an empty gradient vector",
            map.name()
        )));
    }
    let n = g.len() as f64;
    Ok(match map {
        ScalarMap::Min => g.iter().cloned().fold(f64::INFINITY, f64::min),
        ScalarMap::Max => g.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        ScalarMap::Mean => g.iter().sum::<f64>() / n,
        ScalarMap::Std => {
            let mean = g.iter().sum::<f64>() / n;
            (g.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
        }
        ScalarMap::Norm1 => g.iter().map(|v| v.abs()).sum(),
        ScalarMap::Norm2 => g.iter().map(|v| v * v).sum::<f64>().sqrt(),
    })
}

/// The two differentiated kernel stacks.
pub const LAYER_NAMES: [&str; 2] = ["last", "prev"];

/// Gradient feature column names for one head kind: loss part major, layer
/// middle, map minor.
pub fn gradient_columns(head: HeadKind) -> Vec<String> {
    let mut cols = Vec::new();
    for part in head.parts() {
        for layer in LAYER_NAMES {
            for map in ALL_MAPS {
                cols.push(format!("{}.{}.{}", part.name(), layer, map.name()));
            }
        }
    }
    cols
}

/// MC-dropout feature columns: the six maps applied to the per-component
/// sample mean vector and to the per-component sample std vector.
pub fn mc_columns() -> Vec<String> {
    let mut cols = Vec::new();
    for stat in ["mean", "std"] {
        for map in ALL_MAPS {
            cols.push(format!("mc.{}.{}", stat, map.name()));
        }
    }
    cols
}

/// Schema identifier pinning the column set and the statistics conventions.
pub fn schema_id(head: HeadKind, with_gradients: bool, with_mc: bool) -> String {
    let mut parts = vec![format!("head={}", head.name())];
    if with_gradients {
        parts.push(format!(
            "grad=parts:{}x layers:last,prev maps:min,max,mean,std,norm1,norm2",
            head.parts().len()
        ));
    }
    if with_mc {
        parts.push("mc=per-component mean+std over samples, same six maps".to_string());
    }
    parts.push("std=population".to_string());
    format!("detgrad.features.v1;{}", parts.join(";"))
}

/// One labeled feature row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub image_id: String,
    pub box_index: usize,
    pub score: f64,
    /// 1 for TP, 0 for FP.
    pub label_tpfp: u8,
    /// Maximum same-class IoU with the ground truth.
    pub target_iou: f64,
    pub values: Vec<f64>,
}

/// A labeled feature matrix with named columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub schema_id: String,
    pub columns: Vec<String>,
    pub rows: Vec<FeatureRow>,
}

impl FeatureTable {
    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.rows.iter().enumerate() {
            if row.values.len() != self.columns.len() {
                return Err(Error::validation(format!(
                    "feature row {i} has {} values, expected {}",
                    row.values.len(),
                    self.columns.len()
                )));
            }
            if row.values.iter().any(|v| !v.is_finite())
                || !row.score.is_finite()
                || !row.target_iou.is_finite()
            {
                return Err(Error::validation(format!("feature row {i} has non-finite values")));
            }
            if row.label_tpfp > 1 {
                return Err(Error::validation(format!(
                    "feature row {i}: label_tpfp must be 0 or 1"
                )));
            }
        }
        Ok(())
    }

    /// Concatenate the columns of two tables over the same boxes. Rows are
    /// matched by `(image_id, box_index)` and must agree on score/labels.
    pub fn merge(&self, other: &FeatureTable) -> Result<FeatureTable> {
        if self.rows.len() != other.rows.len() {
            return Err(Error::validation(format!(
                "cannot merge feature tables with {} vs {} rows",
                self.rows.len(),
                other.rows.len()
            )));
        }
        let mut index: BTreeMap<(&str, usize), usize> = BTreeMap::new();
        for (i, r) in other.rows.iter().enumerate() {
            index.insert((r.image_id.as_str(), r.box_index), i);
        }
        let mut columns = self.columns.clone();
        columns.extend(other.columns.iter().cloned());
        let mut rows = Vec::with_capacity(self.rows.len());
        for (i, r) in self.rows.iter().enumerate() {
            let j = *index.get(&(r.image_id.as_str(), r.box_index)).ok_or_else(|| {
                Error::validation(format!(
                    "row {i}: box ({}, {}) missing from the other table",
                    r.image_id, r.box_index
                ))
            })?;
            let o = &other.rows[j];
            if o.label_tpfp != r.label_tpfp || (o.score - r.score).abs() > 1e-12 {
                return Err(Error::validation(format!(
                    "row {i}: label/score mismatch between merged tables"
                )));
            }
            let mut values = r.values.clone();
            values.extend(o.values.iter().cloned());
            rows.push(FeatureRow { values, ..r.clone() });
        }
        Ok(FeatureTable {
            schema_id: format!("{}+{}", self.schema_id, other.schema_id),
            columns,
            rows,
        })
    }
}

/// Feature subsets the meta models are trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    /// The detector score only.
    Score,
    /// All gradient metrics (every part, layer and map).
    G,
    /// Two-norms of every gradient.
    Norms2,
    /// One- and two-norms of every gradient.
    Norms12,
    /// MC-dropout features.
    Mc,
    /// Concatenation of G and MC.
    GMc,
}

impl FeatureSource {
    pub fn name(self) -> &'static str {
        match self {
            FeatureSource::Score => "score",
            FeatureSource::G => "G",
            FeatureSource::Norms2 => "norms2",
            FeatureSource::Norms12 => "norms12",
            FeatureSource::Mc => "MC",
            FeatureSource::GMc => "G+MC",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "score" => Ok(FeatureSource::Score),
            "G" | "g" => Ok(FeatureSource::G),
            "norms2" => Ok(FeatureSource::Norms2),
            "norms12" => Ok(FeatureSource::Norms12),
            "MC" | "mc" => Ok(FeatureSource::Mc),
            "G+MC" | "g+mc" => Ok(FeatureSource::GMc),
            other => Err(Error::validation(format!("unknown feature source '{other}'"))),
        }
    }

    fn selects(self, column: &str) -> bool {
        let is_grad = !column.starts_with("mc.");
        match self {
            FeatureSource::Score => false,
            FeatureSource::G => is_grad,
            FeatureSource::Norms2 => is_grad && column.ends_with(".norm2"),
            FeatureSource::Norms12 => {
                is_grad && (column.ends_with(".norm1") || column.ends_with(".norm2"))
            }
            FeatureSource::Mc => column.starts_with("mc."),
            FeatureSource::GMc => true,
        }
    }
}

/// A selected design matrix: rows aligned with the table, columns fixed by
/// the source in schema order (gradient block first, then MC).
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub source: FeatureSource,
    pub column_names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub schema_id: String,
}

/// Select the feature columns of `source` out of the table, preserving the
/// table's column order. `Score` uses the score field as the single column.
pub fn assemble_features(table: &FeatureTable, source: FeatureSource) -> Result<DesignMatrix> {
    table.validate()?;
    if source == FeatureSource::Score {
        return Ok(DesignMatrix {
            source,
            column_names: vec!["score".to_string()],
            rows: table.rows.iter().map(|r| vec![r.score]).collect(),
            schema_id: format!("{};source=score", table.schema_id),
        });
    }
    let picked: Vec<usize> = table
        .columns
        .iter()
        .enumerate()
        .filter(|(_, c)| source.selects(c))
        .map(|(i, _)| i)
        .collect();
    if picked.is_empty() {
        return Err(Error::validation(format!(
            "feature table has no columns for source {}",
            source.name()
        )));
    }
    let column_names = picked.iter().map(|&i| table.columns[i].clone()).collect();
    let rows = table
        .rows
        .iter()
        .map(|r| picked.iter().map(|&i| r.values[i]).collect())
        .collect();
    Ok(DesignMatrix {
        source,
        column_names,
        rows,
        schema_id: format!("{};source={}", table.schema_id, source.name()),
    })
}

/// Gradient feature vector of one box: the six maps of each
/// (part, layer) gradient, flattened in schema order.
pub fn gradient_feature_values(
    per_part_last: &[(LossPart, Vec<f64>)],
    per_part_prev: &[(LossPart, Vec<f64>)],
) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for ((part, last), (part2, prev)) in per_part_last.iter().zip(per_part_prev) {
        debug_assert_eq!(part, part2);
        for layer in [last, prev] {
            for map in ALL_MAPS {
                out.push(apply_map(map, layer)?);
            }
        }
    }
    Ok(out)
}

/// MC feature vector of one box from its per-sample raw output vectors.
pub fn mc_feature_values(mean: &[f64], std: &[f64]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for stat in [mean, std] {
        for map in ALL_MAPS {
            out.push(apply_map(map, stat)?);
        }
    }
    Ok(out)
}
