use serde::{Deserialize, Serialize};

use super::NnError;

/// Guards the RMSE gradient against division by a zero loss.
pub const RMSE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Rmse,
    CrossEntropy,
}

impl LossKind {
    /// Loss and its gradient with respect to the probabilities.
    pub fn eval(self, probs: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>), NnError> {
        match self {
            LossKind::Rmse => rmse_loss(probs, target),
            LossKind::CrossEntropy => cross_entropy_loss(probs, target),
        }
    }
}

/// `sqrt(mean_k (p_k - t_k)^2)`.
pub fn rmse_loss(probs: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>), NnError> {
    check_lengths(probs, target)?;
    let k = probs.len() as f64;
    let mse = probs
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / k;
    let loss = mse.sqrt();
    let denom = k * (loss + RMSE_EPS);
    let grad = probs
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) / denom)
        .collect();
    Ok((loss, grad))
}

/// `-sum_k t_k ln p_k`, with probabilities floored to keep the log finite.
pub fn cross_entropy_loss(probs: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>), NnError> {
    check_lengths(probs, target)?;
    let floor = 1e-300;
    let loss = -probs
        .iter()
        .zip(target)
        .map(|(p, t)| {
            if *t == 0.0 {
                0.0
            } else {
                t * p.max(floor).ln()
            }
        })
        .sum::<f64>();
    let grad = probs
        .iter()
        .zip(target)
        .map(|(p, t)| -t / p.max(floor))
        .collect();
    Ok((loss, grad))
}

pub fn one_hot(label: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[label] = 1.0;
    v
}

fn check_lengths(probs: &[f64], target: &[f64]) -> Result<(), NnError> {
    if probs.len() != target.len() || probs.is_empty() {
        return Err(NnError::ShapeMismatch(format!(
            "loss inputs have lengths {} and {}",
            probs.len(),
            target.len()
        )));
    }
    Ok(())
}
