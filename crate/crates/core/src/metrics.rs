//! Classification and agreement metrics: confusion matrix, precision /
//! recall / F1, RMSE, Pearson CC, concordance CCC and AUC.
//!
//! Variances use the population (1/n) convention throughout.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("label {label} outside [0, {k})")]
    LabelOutOfRange { label: usize, k: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("zero variance; correlation undefined")]
    ZeroVariance,
    #[error("AUC needs both classes present")]
    OneClassOnly,
}

/// Score span used for normalized RMSE (PHQ-8 scores lie in [0, 23]).
pub const SCORE_SPAN: f64 = 23.0;

/// Counts indexed `[predicted][actual]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.counts[i][i]).sum()
    }

    /// `trace / total`, 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        let t = self.total();
        if t == 0 {
            0.0
        } else {
            self.trace() as f64 / t as f64
        }
    }

    /// Rows = predicted, columns = actual; tab separated with headers.
    pub fn to_tsv(&self) -> String {
        let k = self.k();
        let mut s = String::from("pred\\actual");
        for c in 0..k {
            s.push_str(&format!("\t{c}"));
        }
        s.push('\n');
        for (p, row) in self.counts.iter().enumerate() {
            s.push_str(&p.to_string());
            for v in row {
                s.push_str(&format!("\t{v}"));
            }
            s.push('\n');
        }
        s
    }
}

pub fn confusion(
    preds: &[usize],
    truths: &[usize],
    k: usize,
) -> Result<ConfusionMatrix, MetricError> {
    if preds.len() != truths.len() {
        return Err(MetricError::LengthMismatch(preds.len(), truths.len()));
    }
    let mut counts = vec![vec![0u64; k]; k];
    for (&p, &t) in preds.iter().zip(truths) {
        for label in [p, t] {
            if label >= k {
                return Err(MetricError::LabelOutOfRange { label, k });
            }
        }
        counts[p][t] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassScores {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of samples whose actual label is this class.
    pub support: u64,
    /// False when a denominator was zero and the value was set to 0.
    pub precision_defined: bool,
    pub recall_defined: bool,
}

pub fn precision_recall_f1(cm: &ConfusionMatrix) -> Vec<ClassScores> {
    let k = cm.k();
    (0..k)
        .map(|c| {
            let tp = cm.counts[c][c] as f64;
            let predicted: u64 = cm.counts[c].iter().sum();
            let actual: u64 = (0..k).map(|p| cm.counts[p][c]).sum();
            let precision = if predicted > 0 {
                tp / predicted as f64
            } else {
                0.0
            };
            let recall = if actual > 0 { tp / actual as f64 } else { 0.0 };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassScores {
                class: c,
                precision,
                recall,
                f1,
                support: actual,
                precision_defined: predicted > 0,
                recall_defined: actual > 0,
            }
        })
        .collect()
}

pub fn macro_f1(scores: &[ClassScores]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().map(|s| s.f1).sum::<f64>() / scores.len() as f64
}

/// F1 averaged with weights proportional to class support.
pub fn weighted_f1(scores: &[ClassScores]) -> f64 {
    let total: u64 = scores.iter().map(|s| s.support).sum();
    if total == 0 {
        return 0.0;
    }
    scores.iter().map(|s| s.f1 * s.support as f64).sum::<f64>() / total as f64
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<(), MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

pub fn rmse(truth: &[f64], pred: &[f64]) -> Result<f64, MetricError> {
    check_pair(truth, pred)?;
    let mse = truth
        .iter()
        .zip(pred)
        .map(|(t, p)| (t - p) * (t - p))
        .sum::<f64>()
        / truth.len() as f64;
    Ok(mse.sqrt())
}

/// RMSE after dividing both vectors by [`SCORE_SPAN`].
pub fn rmse_normalized(truth: &[f64], pred: &[f64]) -> Result<f64, MetricError> {
    let t: Vec<f64> = truth.iter().map(|v| v / SCORE_SPAN).collect();
    let p: Vec<f64> = pred.iter().map(|v| v / SCORE_SPAN).collect();
    rmse(&t, &p)
}

struct Moments {
    mean_t: f64,
    mean_p: f64,
    var_t: f64,
    var_p: f64,
    cov: f64,
}

fn moments(t: &[f64], p: &[f64]) -> Moments {
    let n = t.len() as f64;
    let mean_t = t.iter().sum::<f64>() / n;
    let mean_p = p.iter().sum::<f64>() / n;
    let (mut var_t, mut var_p, mut cov) = (0.0, 0.0, 0.0);
    for (a, b) in t.iter().zip(p) {
        let (da, db) = (a - mean_t, b - mean_p);
        var_t += da * da;
        var_p += db * db;
        cov += da * db;
    }
    Moments {
        mean_t,
        mean_p,
        var_t: var_t / n,
        var_p: var_p / n,
        cov: cov / n,
    }
}

pub fn pearson_cc(truth: &[f64], pred: &[f64]) -> Result<f64, MetricError> {
    check_pair(truth, pred)?;
    let m = moments(truth, pred);
    if m.var_t <= 0.0 || m.var_p <= 0.0 {
        return Err(MetricError::ZeroVariance);
    }
    Ok((m.cov / (m.var_t.sqrt() * m.var_p.sqrt())).clamp(-1.0, 1.0))
}

/// Concordance correlation coefficient,
/// `2 cov / (σ_T² + σ_P² + (μ_T − μ_P)²)` where `cov = CC σ_T σ_P`.
/// Two equal constant vectors give 1.
pub fn ccc(truth: &[f64], pred: &[f64]) -> Result<f64, MetricError> {
    check_pair(truth, pred)?;
    let m = moments(truth, pred);
    let d = m.mean_t - m.mean_p;
    let denom = m.var_t + m.var_p + d * d;
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok((2.0 * m.cov / denom).clamp(-1.0, 1.0))
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half, via average ranks.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch(scores.len(), labels.len()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricError::OneClassOnly);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; a tie group shares its average rank.
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}
