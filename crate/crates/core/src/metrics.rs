//! Detection metrics with OOD as the positive class.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub fpr95: f64,
    pub auroc: f64,
    /// Threshold at which 95% of ID samples are accepted.
    pub gamma: f64,
    pub n_id: usize,
    pub n_ood: usize,
}

fn check(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() {
        return Err(Error::Usage("in-distribution score set is empty".into()));
    }
    if ood.is_empty() {
        return Err(Error::Usage("OOD score set is empty".into()));
    }
    if let Some(v) = id.iter().chain(ood).find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("score {v} is not finite")));
    }
    Ok(())
}

/// Threshold keeping the lowest 95% of ID scores: the `ceil(0.95 n)`-th
/// smallest ID score (nearest rank).
pub fn id_threshold(id: &[f64]) -> Result<f64> {
    if id.is_empty() {
        return Err(Error::Usage("in-distribution score set is empty".into()));
    }
    let mut sorted = id.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = (95 * sorted.len()).div_ceil(100);
    Ok(sorted[k - 1])
}

/// Fraction of OOD samples accepted as ID at the 95% ID threshold.
/// Returns `(fpr95, gamma)`.
pub fn compute_fpr95(id: &[f64], ood: &[f64]) -> Result<(f64, f64)> {
    check(id, ood)?;
    let gamma = id_threshold(id)?;
    let accepted = ood.iter().filter(|&&s| s <= gamma).count();
    Ok((accepted as f64 / ood.len() as f64, gamma))
}

/// Probability that a random OOD score exceeds a random ID score, ties
/// counting one half.
pub fn compute_auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    check(id, ood)?;
    let mut sorted = id.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (mut gt, mut eq) = (0u128, 0u128);
    for &s in ood {
        let below = sorted.partition_point(|&v| v < s);
        let not_above = sorted.partition_point(|&v| v <= s);
        gt += below as u128;
        eq += (not_above - below) as u128;
    }
    let denom = 2 * id.len() as u128 * ood.len() as u128;
    Ok((2 * gt + eq) as f64 / denom as f64)
}

pub fn evaluate(id: &[f64], ood: &[f64]) -> Result<DetectionMetrics> {
    let (fpr95, gamma) = compute_fpr95(id, ood)?;
    Ok(DetectionMetrics { fpr95, auroc: compute_auroc(id, ood)?, gamma, n_id: id.len(), n_ood: ood.len() })
}
