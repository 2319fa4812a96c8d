//! Meta-model quality metrics: AuROC via the rank/pair formulation,
//! average precision with tie grouping, and the coefficient of
//! determination.

use crate::error::{Error, Result};

fn check_binary(labels: &[f64]) -> Result<(usize, usize)> {
    let mut pos = 0;
    let mut neg = 0;
    for &y in labels {
        if y == 1.0 {
            pos += 1;
        } else if y == 0.0 {
            neg += 1;
        } else {
            return Err(Error::validation(format!("label {y} is not binary")));
        }
    }
    Ok((pos, neg))
}

/// Area under the ROC curve: `P(score+ > score-) + 0.5 P(tie)` computed via
/// average ranks. Errors on one-class input (the metric is undefined).
pub fn auroc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::validation("score/label length mismatch"));
    }
    let (pos, neg) = check_binary(labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::validation("AuROC undefined: needs both classes"));
    }
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(std::cmp::Ordering::Equal));
    // average ranks over tie groups (1-based ranks)
    let mut rank = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for k in i..=j {
            rank[order[k]] = avg;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 =
        labels.iter().zip(&rank).filter(|(&y, _)| y == 1.0).map(|(_, r)| r).sum();
    let p = pos as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Area under the precision-recall curve via the step-wise sum
/// `sum (R_k - R_{k-1}) P_k` over descending-score thresholds, with tied
/// scores processed as one threshold group. Errors without positives.
pub fn average_precision(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::validation("score/label length mismatch"));
    }
    let (pos, _) = check_binary(labels)?;
    if pos == 0 {
        return Err(Error::validation("average precision undefined without positives"));
    }
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for k in i..=j {
            if labels[order[k]] == 1.0 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

/// Coefficient of determination `1 - SS_res / SS_tot`. Errors on fewer than
/// two samples or constant targets.
pub fn r_squared(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::validation("prediction/target length mismatch"));
    }
    if targets.len() < 2 {
        return Err(Error::validation("R^2 needs at least two samples"));
    }
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    let ss_tot: f64 = targets.iter().map(|y| (y - mean) * (y - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::validation("R^2 undefined for constant targets"));
    }
    let ss_res: f64 =
        predictions.iter().zip(targets).map(|(p, y)| (p - y) * (p - y)).sum();
    Ok(1.0 - ss_res / ss_tot)
}
