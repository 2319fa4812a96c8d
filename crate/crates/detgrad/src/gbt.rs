//! Gradient-boosted regression trees serving as meta classifier (logistic
//! objective) and meta regressor (squared error), trained with exact greedy
//! second-order split finding on presorted features.
//!
//! Deliberately desk-scale: no histograms, no feature subsampling, fully
//! deterministic including split tie-breaks (lowest feature index, then
//! lowest threshold).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Logistic,
    SquaredError,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GbtConfig {
    pub n_estimators: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_child_weight: f64,
    /// L2 regularization on leaf weights.
    pub lambda: f64,
    pub objective: Objective,
    pub seed: u64,
}

impl GbtConfig {
    pub fn classifier() -> Self {
        GbtConfig {
            n_estimators: 30,
            max_depth: 6,
            learning_rate: 0.3,
            min_child_weight: 1.0,
            lambda: 1.0,
            objective: Objective::Logistic,
            seed: 0,
        }
    }

    pub fn regressor() -> Self {
        GbtConfig { objective: Objective::SquaredError, ..Self::classifier() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_estimators == 0 {
            return Err(Error::validation("n_estimators must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::validation("learning_rate must lie in (0,1]"));
        }
        if self.max_depth == 0 {
            return Err(Error::validation("max_depth must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum TreeNode {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { value: f64 },
}

/// One regression tree stored as an arena; node 0 is the root. Samples with
/// `row[feature] < threshold` descend left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split { feature, threshold, left, right } => {
                    i = if row[*feature] < *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], i: usize) -> usize {
            match &nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => {
                    1 + walk(nodes, *left).max(walk(nodes, *right))
                }
            }
        }
        walk(&self.nodes, 0)
    }
}

/// A trained boosted ensemble. Leaf values are stored with the learning
/// rate already applied: the raw margin is `base_score + sum(tree outputs)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GbtModel {
    pub version: u32,
    pub config: GbtConfig,
    pub feature_schema_id: String,
    pub n_features: usize,
    pub base_score: f64,
    pub trees: Vec<Tree>,
}

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Per-round training diagnostics.
#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Training loss after each boosting round (index 0 = before any tree).
    pub round_losses: Vec<f64>,
    pub warning: Option<String>,
}

struct GradHess {
    grad: Vec<f64>,
    hess: Vec<f64>,
}

fn grad_hess(objective: Objective, margins: &[f64], targets: &[f64]) -> GradHess {
    let n = margins.len();
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    for i in 0..n {
        match objective {
            Objective::Logistic => {
                let p = sigmoid(margins[i]);
                grad[i] = p - targets[i];
                hess[i] = (p * (1.0 - p)).max(1e-16);
            }
            Objective::SquaredError => {
                grad[i] = margins[i] - targets[i];
                hess[i] = 1.0;
            }
        }
    }
    GradHess { grad, hess }
}

fn training_loss(objective: Objective, margins: &[f64], targets: &[f64]) -> f64 {
    let n = margins.len() as f64;
    match objective {
        Objective::Logistic => {
            margins
                .iter()
                .zip(targets)
                .map(|(&m, &y)| {
                    let p = sigmoid(m);
                    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
                })
                .sum::<f64>()
                / n
        }
        Objective::SquaredError => {
            margins.iter().zip(targets).map(|(&m, &y)| (m - y) * (m - y)).sum::<f64>() / n
        }
    }
}

/// Train a boosted ensemble. Deterministic under the config; the training
/// loss is recorded after every round.
pub fn train(
    config: &GbtConfig,
    rows: &[Vec<f64>],
    targets: &[f64],
    feature_schema_id: &str,
) -> Result<(GbtModel, TrainReport)> {
    config.validate()?;
    if rows.is_empty() {
        return Err(Error::validation("cannot train on an empty dataset"));
    }
    if rows.len() != targets.len() {
        return Err(Error::validation(format!(
            "feature/target length mismatch: {} rows vs {} targets",
            rows.len(),
            targets.len()
        )));
    }
    let n_features = rows[0].len();
    if n_features == 0 || rows.iter().any(|r| r.len() != n_features) {
        return Err(Error::validation("feature rows must be non-empty and of equal width"));
    }
    for (i, &y) in targets.iter().enumerate() {
        match config.objective {
            Objective::Logistic => {
                if y != 0.0 && y != 1.0 {
                    return Err(Error::validation(format!(
                        "logistic target at row {i} must be 0 or 1, got {y}"
                    )));
                }
            }
            Objective::SquaredError => {
                if !(0.0..=1.0).contains(&y) {
                    return Err(Error::validation(format!(
                        "regression target at row {i} must lie in [0,1], got {y}"
                    )));
                }
            }
        }
    }

    let n = rows.len();
    let mean_y = targets.iter().sum::<f64>() / n as f64;
    let (base_score, degenerate) = match config.objective {
        Objective::SquaredError => (mean_y, false),
        Objective::Logistic => {
            let p = mean_y.clamp(1e-6, 1.0 - 1e-6);
            ((p / (1.0 - p)).ln(), mean_y == 0.0 || mean_y == 1.0)
        }
    };
    let mut margins = vec![base_score; n];
    let mut report =
        TrainReport { round_losses: vec![training_loss(config.objective, &margins, targets)], warning: None };

    if degenerate {
        report.warning =
            Some("all logistic targets share one class; returning a constant model".to_string());
        eprintln!("warning: {}", report.warning.as_ref().unwrap());
        return Ok((
            GbtModel {
                version: MODEL_FORMAT_VERSION,
                config: config.clone(),
                feature_schema_id: feature_schema_id.to_string(),
                n_features,
                base_score,
                trees: Vec::new(),
            },
            report,
        ));
    }

    // column-major copy plus one presorted index list per feature
    let columns: Vec<Vec<f64>> =
        (0..n_features).map(|f| rows.iter().map(|r| r[f]).collect()).collect();
    let presorted: Vec<Vec<u32>> = columns
        .iter()
        .map(|col| {
            let mut idx: Vec<u32> = (0..n as u32).collect();
            idx.sort_by(|&a, &b| {
                col[a as usize]
                    .partial_cmp(&col[b as usize])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            idx
        })
        .collect();

    let mut trees = Vec::with_capacity(config.n_estimators);
    for _round in 0..config.n_estimators {
        let gh = grad_hess(config.objective, &margins, targets);
        let tree = grow_tree(config, &columns, &presorted, &gh);
        for (i, row) in rows.iter().enumerate() {
            margins[i] += tree.predict_row(row);
        }
        report.round_losses.push(training_loss(config.objective, &margins, targets));
        trees.push(tree);
    }

    Ok((
        GbtModel {
            version: MODEL_FORMAT_VERSION,
            config: config.clone(),
            feature_schema_id: feature_schema_id.to_string(),
            n_features,
            base_score,
            trees,
        },
        report,
    ))
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    gain: f64,
}

/// Grow one tree depth-wise with per-node presorted feature lists.
fn grow_tree(
    config: &GbtConfig,
    columns: &[Vec<f64>],
    presorted: &[Vec<u32>],
    gh: &GradHess,
) -> Tree {
    let lambda = config.lambda;
    let lr = config.learning_rate;
    let mut nodes: Vec<TreeNode> = vec![TreeNode::Leaf { value: 0.0 }];
    // per active node: presorted per-feature sample lists
    let mut level: Vec<(usize, Vec<Vec<u32>>)> = vec![(0, presorted.to_vec())];

    for depth in 0..=config.max_depth {
        let mut next = Vec::new();
        for (node_id, lists) in level {
            let samples = &lists[0];
            let g: f64 = samples.iter().map(|&i| gh.grad[i as usize]).sum();
            let h: f64 = samples.iter().map(|&i| gh.hess[i as usize]).sum();
            let leaf_value = -g / (h + lambda) * lr;
            if depth == config.max_depth || samples.len() < 2 {
                nodes[node_id] = TreeNode::Leaf { value: leaf_value };
                continue;
            }
            let best = find_best_split(config, columns, &lists, gh, g, h);
            let Some(best) = best else {
                nodes[node_id] = TreeNode::Leaf { value: leaf_value };
                continue;
            };
            // stable partition of every feature list by the chosen split
            let goes_left: Vec<bool> = {
                let col = &columns[best.feature];
                let mut mask = vec![false; columns[0].len()];
                for &i in samples.iter() {
                    mask[i as usize] = col[i as usize] < best.threshold;
                }
                mask
            };
            let mut left_lists = Vec::with_capacity(lists.len());
            let mut right_lists = Vec::with_capacity(lists.len());
            for flist in &lists {
                let mut l = Vec::new();
                let mut r = Vec::new();
                for &i in flist {
                    if goes_left[i as usize] {
                        l.push(i);
                    } else {
                        r.push(i);
                    }
                }
                left_lists.push(l);
                right_lists.push(r);
            }
            let left_id = nodes.len();
            nodes.push(TreeNode::Leaf { value: 0.0 });
            let right_id = nodes.len();
            nodes.push(TreeNode::Leaf { value: 0.0 });
            nodes[node_id] = TreeNode::Split {
                feature: best.feature,
                threshold: best.threshold,
                left: left_id,
                right: right_id,
            };
            next.push((left_id, left_lists));
            next.push((right_id, right_lists));
        }
        if next.is_empty() {
            break;
        }
        level = next;
    }
    Tree { nodes }
}

fn find_best_split(
    config: &GbtConfig,
    columns: &[Vec<f64>],
    lists: &[Vec<u32>],
    gh: &GradHess,
    g_total: f64,
    h_total: f64,
) -> Option<BestSplit> {
    let lambda = config.lambda;
    let parent_score = g_total * g_total / (h_total + lambda);
    let mut best: Option<BestSplit> = None;
    for (f, flist) in lists.iter().enumerate() {
        let col = &columns[f];
        let mut gl = 0.0;
        let mut hl = 0.0;
        for w in 0..flist.len() - 1 {
            let i = flist[w] as usize;
            gl += gh.grad[i];
            hl += gh.hess[i];
            let v = col[i];
            let v_next = col[flist[w + 1] as usize];
            if v_next <= v {
                continue; // tied values cannot separate
            }
            let hr = h_total - hl;
            if hl < config.min_child_weight || hr < config.min_child_weight {
                continue;
            }
            let gr = g_total - gl;
            let gain =
                gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - parent_score;
            if gain <= 1e-12 {
                continue;
            }
            let threshold = 0.5 * (v + v_next);
            let better = match &best {
                None => true,
                Some(b) => {
                    gain > b.gain
                        || (gain == b.gain
                            && (f < b.feature || (f == b.feature && threshold < b.threshold)))
                }
            };
            if better {
                best = Some(BestSplit { feature: f, threshold, gain });
            }
        }
    }
    best
}

/// Predict raw-probability (logistic) or clipped-[0,1] (squared error)
/// outputs for every row.
pub fn predict(model: &GbtModel, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        if row.len() != model.n_features {
            return Err(Error::validation(format!(
                "row {i} has {} features, model expects {} (schema {})",
                row.len(),
                model.n_features,
                model.feature_schema_id
            )));
        }
        let margin: f64 =
            model.base_score + model.trees.iter().map(|t| t.predict_row(row)).sum::<f64>();
        out.push(match model.config.objective {
            Objective::Logistic => sigmoid(margin),
            Objective::SquaredError => margin.clamp(0.0, 1.0),
        });
    }
    Ok(out)
}

/// Predict against a design matrix, enforcing schema agreement.
pub fn predict_matrix(model: &GbtModel, m: &crate::features::DesignMatrix) -> Result<Vec<f64>> {
    if model.feature_schema_id != m.schema_id {
        return Err(Error::validation(format!(
            "feature schema mismatch: model '{}' vs data '{}'",
            model.feature_schema_id, m.schema_id
        )));
    }
    predict(model, &m.rows)
}

pub fn to_json(model: &GbtModel) -> Result<String> {
    serde_json::to_string_pretty(model)
        .map_err(|e| Error::internal(format!("model serialization failed: {e}")))
}

pub fn from_json(s: &str) -> Result<GbtModel> {
    let model: GbtModel = serde_json::from_str(s)
        .map_err(|e| Error::validation(format!("malformed model JSON: {e}")))?;
    if model.version != MODEL_FORMAT_VERSION {
        return Err(Error::validation(format!(
            "model format version {} unsupported (expected {MODEL_FORMAT_VERSION})",
            model.version
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_target_is_a_fixed_point() {
        let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64, (i * 7 % 13) as f64]).collect();
        let targets = vec![0.37; 40];
        let (model, report) = train(&GbtConfig::regressor(), &rows, &targets, "t").unwrap();
        for p in predict(&model, &rows).unwrap() {
            assert!((p - 0.37).abs() < 1e-9);
        }
        for w in report.round_losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-15);
        }
    }

    #[test]
    fn separable_1d_feature_reaches_perfect_training_auroc() {
        let rows: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64]).collect();
        let targets: Vec<f64> = (0..30).map(|i| if i < 15 { 0.0 } else { 1.0 }).collect();
        let (model, _) = train(&GbtConfig::classifier(), &rows, &targets, "t").unwrap();
        let preds = predict(&model, &rows).unwrap();
        let auroc = crate::metrics::auroc(&preds, &targets).unwrap();
        assert_eq!(auroc, 1.0);
        // probabilities ordered consistently with labels
        let max_neg = preds[..15].iter().cloned().fold(0.0, f64::max);
        let min_pos = preds[15..].iter().cloned().fold(1.0, f64::min);
        assert!(max_neg < min_pos);
    }

    #[test]
    fn regression_beats_the_mean_predictor_on_random_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let rows: Vec<Vec<f64>> =
            (0..200).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let targets: Vec<f64> = rows
            .iter()
            .map(|r| {
                let v: f64 = 0.5 + 0.3 * r[0] - 0.2 * r[3] + 0.05 * rng.random_range(-1.0..1.0);
                v.clamp(0.0, 1.0)
            })
            .collect();
        let (model, _) = train(&GbtConfig::regressor(), &rows, &targets, "t").unwrap();
        let preds = predict(&model, &rows).unwrap();
        let r2 = crate::metrics::r_squared(&preds, &targets).unwrap();
        // the zero-tree baseline (mean predictor) has R^2 = 0
        assert!(r2 > 0.0);
    }

    #[test]
    fn empty_tree_list_predicts_base_probability() {
        let model = GbtModel {
            version: MODEL_FORMAT_VERSION,
            config: GbtConfig::classifier(),
            feature_schema_id: "t".into(),
            n_features: 2,
            base_score: 0.0, // margin 0 -> probability 0.5
            trees: Vec::new(),
        };
        let preds = predict(&model, &[vec![1.0, 2.0], vec![-3.0, 0.0]]).unwrap();
        assert!(preds.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn single_split_tree_traces_by_hand() {
        let tree = Tree {
            nodes: vec![
                TreeNode::Split { feature: 0, threshold: 1.5, left: 1, right: 2 },
                TreeNode::Leaf { value: -0.25 },
                TreeNode::Leaf { value: 0.75 },
            ],
        };
        let model = GbtModel {
            version: MODEL_FORMAT_VERSION,
            config: GbtConfig::regressor(),
            feature_schema_id: "t".into(),
            n_features: 1,
            base_score: 0.1,
            trees: vec![tree],
        };
        let preds = predict(&model, &[vec![1.0], vec![2.0]]).unwrap();
        assert!((preds[0] - 0.0).abs() < 1e-15); // 0.1 - 0.25 clipped to 0
        assert!((preds[1] - 0.85).abs() < 1e-15);
    }

    #[test]
    fn one_class_logistic_returns_constant_model_with_warning() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let targets = vec![1.0; 10];
        let (model, report) = train(&GbtConfig::classifier(), &rows, &targets, "t").unwrap();
        assert!(model.trees.is_empty());
        assert!(report.warning.is_some());
        let preds = predict(&model, &rows).unwrap();
        assert!(preds.iter().all(|&p| p > 0.99));
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let rows: Vec<Vec<f64>> = vec![vec![1.0], vec![2.0]];
        assert!(train(&GbtConfig::regressor(), &rows, &[0.5], "t").is_err());
    }

    #[test]
    fn json_round_trip_preserves_predictions_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<f64>> =
            (0..60).map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let targets: Vec<f64> = (0..60).map(|i| (i % 2) as f64).collect();
        let (model, _) = train(&GbtConfig::classifier(), &rows, &targets, "t").unwrap();
        let json = to_json(&model).unwrap();
        let back = from_json(&json).unwrap();
        let a = predict(&model, &rows).unwrap();
        let b = predict(&back, &rows).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
