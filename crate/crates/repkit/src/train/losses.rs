//! Loss functions.

use crate::error::{Error, Result};
use crate::signal::Label;

/// Probability clamp bound for the cross-entropy logarithms.
const PROB_CLAMP: f64 = 1e-7;

/// Mean binary cross-entropy with peak as the positive class.
/// Probabilities are clamped to [1e-7, 1 - 1e-7] before the logarithms.
pub fn bce_loss(probs: &[f64], labels: &[Label]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::InvalidArgument("empty batch in bce_loss".into()));
    }
    if probs.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} probabilities vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (&p, &label) in probs.iter().zip(labels) {
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        total += if label.is_peak() {
            -p.ln()
        } else {
            -(1.0 - p).ln()
        };
    }
    Ok(total / probs.len() as f64)
}

/// Squared Euclidean distance between two embeddings.
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Hinge triplet loss on squared distances:
/// max(0, d_ap^2 - d_an^2 + margin).
pub fn triplet_loss(d_ap_sq: f64, d_an_sq: f64, margin: f64) -> f64 {
    (d_ap_sq - d_an_sq + margin).max(0.0)
}
