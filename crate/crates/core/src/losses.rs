//! Tempered distributions, cross-entropy, the KL label regularizer and the
//! way they combine into per-level and total objectives.

use serde::Serialize;

use crate::error::{HseError, Result};
use crate::tensor::kernels;

/// Temperature used for the label regularizer.
pub const DEFAULT_TEMPERATURE: f64 = 4.0;

/// Balance weight compensating the `1/T²` shrinkage of soft-target gradients.
pub fn default_gamma(temperature: f64) -> f64 {
    temperature * temperature
}

#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    pub probs: Vec<f64>,
    pub temperature: f64,
}

fn check_temperature(t: f64) -> Result<()> {
    if t.is_nan() || t <= 0.0 || t.is_infinite() {
        Err(HseError::InvalidArgument(format!(
            "temperature must be a positive finite number, got {t}"
        )))
    } else {
        Ok(())
    }
}

fn check_scores(scores: &[f64], what: &str) -> Result<()> {
    if scores.is_empty() {
        return Err(HseError::shape("losses", format!("{what}: empty score vector")));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(HseError::NonFinite(what.to_string()));
    }
    Ok(())
}

/// `p_c = exp(s_c / T) / Σ exp(s_c' / T)`.
pub fn tempered_softmax(scores: &[f64], temperature: f64) -> Result<Distribution> {
    check_temperature(temperature)?;
    check_scores(scores, "tempered_softmax")?;
    let mut probs = vec![0.0; scores.len()];
    kernels::softmax_into(scores, temperature, &mut probs);
    Ok(Distribution { probs, temperature })
}

/// `log p_c` of the tempered softmax, evaluated without forming `p`.
pub fn tempered_log_softmax(scores: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    check_scores(scores, "tempered_log_softmax")?;
    let lse = kernels::log_sum_exp(scores, temperature);
    Ok(scores.iter().map(|s| s / temperature - lse).collect())
}

/// `KL(p'ᵀ ‖ pᵀ) = Σ p'_c (log p'_c − log p_c)` where `p'` comes from the
/// extended parent scores and `p` from this level's scores.
pub fn kl_regularizer(parent_extended: &[f64], scores: &[f64], temperature: f64) -> Result<f64> {
    if parent_extended.len() != scores.len() {
        return Err(HseError::shape(
            "kl_regularizer",
            format!("{} extended scores vs {} scores", parent_extended.len(), scores.len()),
        ));
    }
    let log_q = tempered_log_softmax(parent_extended, temperature)?;
    let log_p = tempered_log_softmax(scores, temperature)?;
    // Rounding can leave a -1e-17 residue for identical distributions.
    let kl: f64 = log_q
        .iter()
        .zip(&log_p)
        .map(|(&lq, &lp)| {
            let q = lq.exp();
            if q > 0.0 {
                q * (lq - lp)
            } else {
                0.0
            }
        })
        .sum();
    Ok(kl.max(0.0))
}

/// `−log softmax(scores)[true_class]` at unit temperature.
pub fn cross_entropy(scores: &[f64], true_class: usize) -> Result<f64> {
    check_scores(scores, "cross_entropy")?;
    if true_class >= scores.len() {
        return Err(HseError::OutOfRange {
            what: "class index",
            index: true_class,
            size: scores.len(),
        });
    }
    Ok(kernels::log_sum_exp(scores, 1.0) - scores[true_class])
}

/// Loss components of one level for one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LevelLoss {
    /// Classification part: the sum of the cross-entropies of every
    /// classifier output at this level.
    pub classification: f64,
    /// KL regularizer (zero at the first level or with regularization off).
    pub regularization: f64,
    /// `classification + gamma · regularization`.
    pub combined: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LossBundle {
    pub levels: Vec<LevelLoss>,
    pub gamma: f64,
    pub total: f64,
}

/// `L_i = Σ CE + γ·ℓ_r`.
pub fn level_loss(cross_entropies: &[f64], regularization: f64, gamma: f64) -> LevelLoss {
    let classification = cross_entropies.iter().sum();
    LevelLoss {
        classification,
        regularization,
        combined: classification + gamma * regularization,
    }
}

/// `L = L₁ᶜ + Σ_{i≥2} L_i`. The first level contributes its classification
/// loss only, whatever its `regularization` field holds.
pub fn total_loss(levels: &[LevelLoss]) -> f64 {
    match levels.split_first() {
        None => 0.0,
        Some((first, rest)) => first.classification + rest.iter().map(|l| l.combined).sum::<f64>(),
    }
}

pub fn bundle(levels: Vec<LevelLoss>, gamma: f64) -> LossBundle {
    let total = total_loss(&levels);
    LossBundle { levels, gamma, total }
}
