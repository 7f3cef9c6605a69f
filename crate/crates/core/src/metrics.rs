//! Evaluation metrics for gap classification and gap regression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Absent when only one class is present.
    pub auc: Option<f64>,
    pub threshold: f64,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub roc_points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub r_squared: f64,
    /// Root-mean-square error in eV.
    pub rmse: f64,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub scatter: Vec<(f64, f64)>,
}

fn check_lengths(a: usize, b: usize, min: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("{a} predictions vs {b} targets")));
    }
    if a < min {
        return Err(Error::ShapeMismatch(format!("need at least {min} samples, got {a}")));
    }
    Ok(())
}

/// Confusion-matrix metrics at `threshold` (score >= threshold is positive),
/// rank AUC and the ROC curve.
pub fn classification_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> Result<ClassificationReport> {
    check_lengths(scores.len(), labels.len(), 1)?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    let (auc, roc_points) = match auc_rank(scores, labels) {
        Ok(a) => (Some(a), roc_curve(scores, labels)?),
        Err(Error::SingleClass) => (None, Vec::new()),
        Err(e) => return Err(e),
    };
    Ok(ClassificationReport {
        accuracy: ratio(tp + tn, scores.len()),
        precision,
        recall,
        f1,
        auc,
        threshold,
        roc_points,
    })
}

fn class_counts(labels: &[bool]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    Ok((pos, neg))
}

/// Indices sorted by score, descending. NaN scores sort last.
fn order_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Mann-Whitney AUC: `(R+ - n+(n+ + 1)/2) / (n+ n-)` with tied scores given
/// their average rank.
pub fn auc_rank(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores.len(), labels.len(), 1)?;
    let (pos, neg) = class_counts(labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// ROC points `(fpr, tpr)` at every distinct score threshold, from (0,0) to (1,1).
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    check_lengths(scores.len(), labels.len(), 1)?;
    let (pos, neg) = class_counts(labels)?;
    let idx = order_desc(scores);
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]].total_cmp(&s).is_eq() {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(points)
}

/// Area under the ROC curve by the trapezoidal rule.
pub fn auc_trapezoid(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let pts = roc_curve(scores, labels)?;
    Ok(pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum())
}

pub fn regression_metrics(preds: &[f64], targets: &[f64]) -> Result<RegressionReport> {
    check_lengths(preds.len(), targets.len(), 2)?;
    let n = targets.len() as f64;
    let mean = targets.iter().sum::<f64>() / n;
    let ss_tot: f64 = targets.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::ZeroVariance);
    }
    let ss_res: f64 = preds.iter().zip(targets).map(|(p, t)| (p - t).powi(2)).sum();
    Ok(RegressionReport {
        r_squared: 1.0 - ss_res / ss_tot,
        rmse: (ss_res / n).sqrt(),
        scatter: targets.iter().copied().zip(preds.iter().copied()).collect(),
    })
}
