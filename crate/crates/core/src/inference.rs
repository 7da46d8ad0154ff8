//! Posterior over the latent class given one example's votes.

use crate::encoding::ABSTAIN;
use crate::error::{Error, Result};

/// Accuracies are clamped into `[ACCURACY_CLAMP, 1 − ACCURACY_CLAMP]`.
pub const ACCURACY_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorLabel {
    pub probs: Vec<f64>,
    /// One-based argmax class.
    pub hard: usize,
    /// Every source abstained; `probs` is the prior.
    pub abstained: bool,
    /// Some accuracy had to be clamped away from 0 or 1.
    pub clamped: bool,
}

/// `p(y | λ) ∝ p(y) · Π_i ℓ_i(y)^{w_i}` where `ℓ_i(y) = a_i` if source `i`
/// voted `y` and `(1 − a_i)/(k − 1)` otherwise.
///
/// Sources sharing a connected component of the dependency graph split one
/// unit of weight evenly among those that voted, so a clique of correlated
/// sources counts as a single piece of evidence. Abstaining sources and
/// sources without an accuracy (`None`) are skipped.
pub fn posterior(
    votes: &[u32],
    accuracies: &[Option<f64>],
    prior: &[f64],
    component_ids: &[usize],
) -> Result<PosteriorLabel> {
    let m = votes.len();
    if accuracies.len() != m {
        return Err(Error::LengthMismatch { left: m, right: accuracies.len() });
    }
    if component_ids.len() != m {
        return Err(Error::LengthMismatch { left: m, right: component_ids.len() });
    }
    let k = prior.len();
    if k < 2 {
        return Err(Error::InvalidNumClasses(k));
    }

    let voters: Vec<usize> =
        (0..m).filter(|&i| votes[i] != ABSTAIN && accuracies[i].is_some() && (votes[i] as usize) <= k).collect();
    if voters.is_empty() {
        let total: f64 = prior.iter().sum();
        let probs: Vec<f64> = prior.iter().map(|p| p / total).collect();
        let hard = hard_label(&probs);
        return Ok(PosteriorLabel { probs, hard, abstained: true, clamped: false });
    }

    let mut voters_per_component = std::collections::BTreeMap::new();
    for &i in &voters {
        *voters_per_component.entry(component_ids[i]).or_insert(0usize) += 1;
    }

    let mut clamped = false;
    let mut log_p: Vec<f64> = prior.iter().map(|p| p.ln()).collect();
    for &i in &voters {
        let raw = accuracies[i].unwrap_or(0.5);
        let a = raw.clamp(ACCURACY_CLAMP, 1.0 - ACCURACY_CLAMP);
        clamped |= a != raw;
        let weight = 1.0 / voters_per_component[&component_ids[i]] as f64;
        let hit = a.ln();
        let miss = ((1.0 - a) / (k - 1) as f64).ln();
        for (y, lp) in log_p.iter_mut().enumerate() {
            *lp += weight * if votes[i] as usize == y + 1 { hit } else { miss };
        }
    }

    let max = log_p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = log_p.iter().map(|lp| (lp - max).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    let probs: Vec<f64> = unnorm.iter().map(|p| p / total).collect();
    let hard = hard_label(&probs);
    Ok(PosteriorLabel { probs, hard, abstained: false, clamped })
}

/// One-based argmax; ties go to the smallest class.
pub fn hard_label(probs: &[f64]) -> usize {
    let mut best = 0;
    for (c, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = c;
        }
    }
    best + 1
}
