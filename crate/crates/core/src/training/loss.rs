use serde::{Deserialize, Serialize};

use crate::error::{HtrError, Result};
use crate::session::Session;
use crate::tensor::{Scalar, Var};
use crate::transducer::{TargetBatch, PAD};

/// Smallest probability allowed inside the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Focusing parameter; 0 gives plain cross-entropy.
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { gamma: 2.0 }
    }
}

/// `−(1−p)^γ · log p` for one true-class probability.
pub fn focal_term(p: f64, gamma: f64) -> f64 {
    let w = if gamma == 0.0 { 1.0 } else { (1.0 - p).max(0.0).powf(gamma) };
    -w * p.max(PROB_FLOOR).ln()
}

/// Focal loss of one sequence: `probs[t]` is the predicted distribution at
/// step `t`, `targets[t]` its gold class. `<pad>` targets are skipped.
pub fn sequence_focal_loss(probs: &[Vec<f64>], targets: &[usize], gamma: f64) -> Result<f64> {
    if probs.len() < targets.len() {
        return Err(HtrError::Data(format!("{} targets but only {} predicted steps", targets.len(), probs.len())));
    }
    let mut total = 0.0;
    for (dist, &t) in probs.iter().zip(targets) {
        if t == PAD {
            continue;
        }
        let p = *dist.get(t).ok_or_else(|| HtrError::Data(format!("target class {t} outside {} classes", dist.len())))?;
        total += focal_term(p, gamma);
    }
    Ok(total)
}

/// Cross-entropy `−Σ log p(y_t)` of one sequence.
pub fn sequence_cross_entropy(probs: &[Vec<f64>], targets: &[usize]) -> Result<f64> {
    sequence_focal_loss(probs, targets, 0.0)
}

/// Per-item focal losses summed and divided by the batch size M.
pub fn batch_loss(probs: &[Vec<Vec<f64>>], targets: &[Vec<usize>], gamma: f64) -> Result<f64> {
    if probs.is_empty() || probs.len() != targets.len() {
        return Err(HtrError::Data(format!("{} predicted items for {} target rows", probs.len(), targets.len())));
    }
    let mut total = 0.0;
    for (p, t) in probs.iter().zip(targets) {
        total += sequence_focal_loss(p, t, gamma)?;
    }
    Ok(total / probs.len() as f64)
}

/// Differentiable batch loss of teacher-forced `logits: [B×Td×N]`.
pub fn batch_loss_graph<T: Scalar>(s: &mut Session<'_, T>, logits: Var, targets: &TargetBatch, gamma: f64) -> Result<Var> {
    let n = *s.graph.shape(logits).last().unwrap_or(&0);
    let b = targets.batch();
    let flat = s.graph.reshape(logits, &[b * targets.steps, n])?;
    s.graph.focal_loss(flat, &targets.gold, gamma, 1.0 / b as f64, PROB_FLOOR)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_values() {
        assert!((focal_term(0.5, 2.0) - 0.25 * 2f64.ln()).abs() < 1e-12);
        assert_eq!(focal_term(1.0, 2.0), 0.0);
        let perfect = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert_eq!(sequence_focal_loss(&perfect, &[1, 0], 2.0).unwrap(), 0.0);
        let half = vec![vec![0.5, 0.5]];
        let b = batch_loss(&[perfect, half], &[vec![1, 0], vec![1]], 2.0).unwrap();
        assert!((b - 0.086643).abs() < 1e-6);
    }

    #[test]
    fn floor_keeps_loss_finite() {
        assert!(focal_term(0.0, 0.0).is_finite());
        assert!((focal_term(0.0, 0.0) - 12.0 * 10f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn out_of_range_target() {
        assert!(matches!(sequence_focal_loss(&[vec![1.0]], &[3], 2.0), Err(HtrError::Data(_))));
    }
}
