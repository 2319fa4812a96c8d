//! Reliability binning and the three calibration errors (maximum, average,
//! count-weighted expected), plus reliability-diagram data emission.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed-width confidence bins over (0,1]. Bin `i` (1-based) covers
/// `((i-1)/B, i/B]`; confidence 0 is assigned to bin 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub n_bins: usize,
    pub counts: Vec<usize>,
    /// Fraction of correct samples per bin (0 for empty bins).
    pub acc: Vec<f64>,
    /// Mean confidence per bin (0 for empty bins).
    pub conf: Vec<f64>,
}

pub const DEFAULT_BINS: usize = 10;

/// Sort `(confidence, correct)` samples into `n_bins` equal-width bins.
pub fn bin_reliability(confidences: &[f64], labels: &[bool], n_bins: usize) -> Result<ReliabilityBins> {
    if confidences.len() != labels.len() {
        return Err(Error::validation("confidence/label length mismatch"));
    }
    if n_bins == 0 {
        return Err(Error::validation("need at least one bin"));
    }
    let mut counts = vec![0usize; n_bins];
    let mut correct = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    for (&c, &y) in confidences.iter().zip(labels) {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::validation(format!("confidence {c} outside [0,1]")));
        }
        // half-open on the left, closed on the right; 0 maps into bin 1
        let mut bin = (c * n_bins as f64).ceil() as usize;
        if bin == 0 {
            bin = 1;
        }
        let bin = bin.min(n_bins) - 1;
        counts[bin] += 1;
        conf_sum[bin] += c;
        if y {
            correct[bin] += 1;
        }
    }
    let acc = counts
        .iter()
        .zip(&correct)
        .map(|(&n, &c)| if n > 0 { c as f64 / n as f64 } else { 0.0 })
        .collect();
    let conf = counts
        .iter()
        .zip(&conf_sum)
        .map(|(&n, &s)| if n > 0 { s / n as f64 } else { 0.0 })
        .collect();
    Ok(ReliabilityBins { n_bins, counts, acc, conf })
}

/// Calibration errors over the bins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationErrors {
    /// Maximum |acc - conf| over non-empty bins.
    pub mce: f64,
    /// Unweighted mean |acc - conf| over non-empty bins.
    pub ace: f64,
    /// Count-weighted mean |acc - conf|.
    pub ece: f64,
}

/// Maximum, average and count-weighted expected calibration error.
/// Empty bins carry no gap: they are excluded from the maximum and from the
/// ACE divisor, and contribute zero weight to ECE.
pub fn calibration_errors(bins: &ReliabilityBins) -> Result<CalibrationErrors> {
    let total: usize = bins.counts.iter().sum();
    if total == 0 {
        return Err(Error::validation("calibration errors undefined on empty bins"));
    }
    let mut mce = 0.0f64;
    let mut gap_sum = 0.0;
    let mut weighted = 0.0;
    let mut non_empty = 0usize;
    for i in 0..bins.n_bins {
        if bins.counts[i] == 0 {
            continue;
        }
        let gap = (bins.acc[i] - bins.conf[i]).abs();
        mce = mce.max(gap);
        gap_sum += gap;
        weighted += bins.counts[i] as f64 / total as f64 * gap;
        non_empty += 1;
    }
    Ok(CalibrationErrors { mce, ace: gap_sum / non_empty as f64, ece: weighted })
}

/// One reliability-diagram row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityRow {
    pub bin_low: f64,
    pub bin_high: f64,
    pub count: usize,
    pub acc: f64,
    pub conf: f64,
}

/// Lossless dump of the bins for external plotting.
pub fn reliability_diagram_data(bins: &ReliabilityBins) -> Vec<ReliabilityRow> {
    (0..bins.n_bins)
        .map(|i| ReliabilityRow {
            bin_low: i as f64 / bins.n_bins as f64,
            bin_high: (i + 1) as f64 / bins.n_bins as f64,
            count: bins.counts[i],
            acc: bins.acc[i],
            conf: bins.conf[i],
        })
        .collect()
}
