use serde::{Deserialize, Serialize};

use crate::dp::EmbeddingBatch;
use crate::numerics::{normal_quantile, pairwise_distances};
use crate::{Error, Result};

/// Gaussian fit of a batch's pairwise-distance sample and the derived
/// local-sensitivity bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityEstimate {
    pub mu_h: f64,
    /// Sample (n−1) standard deviation of the distances.
    pub sigma_h: f64,
    /// Estimated local sensitivity `Δ̃`, clamped into `(1e-6·t, 2t]`.
    pub delta_local: f64,
    pub p2: f64,
}

impl SensitivityEstimate {
    /// Factor `2t / Δ̃` applied by [`rescale`].
    pub fn factor(&self, t: f64) -> f64 {
        2.0 * t / self.delta_local
    }
}

fn clamp_delta(raw: f64, t: f64) -> f64 {
    let floor = 1e-6 * t;
    if raw.is_nan() || raw <= floor {
        floor
    } else {
        raw.min(2.0 * t)
    }
}

fn mean_and_sample_std(d: &[f64]) -> (f64, f64) {
    let n = d.len() as f64;
    let mu = d.iter().sum::<f64>() / n;
    let var = if d.len() > 1 {
        d.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mu, var.sqrt())
}

fn check_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::arg(format!("clip threshold must be > 0, got {t}")))
    }
}

/// Quantile estimate `μ_h + σ_h·√2·erf⁻¹(2p₂−1)` from a distance sample.
pub fn estimate_from_distances(distances: &[f64], p2: f64, t: f64) -> Result<SensitivityEstimate> {
    check_threshold(t)?;
    if distances.is_empty() {
        return Err(Error::arg("sensitivity estimate needs at least one distance"));
    }
    if !(p2 > 0.0 && p2 < 1.0) {
        return Err(Error::arg(format!("p2 must lie in (0, 1), got {p2}")));
    }
    let (mu_h, sigma_h) = mean_and_sample_std(distances);
    let raw = mu_h + normal_quantile(p2)? * sigma_h;
    Ok(SensitivityEstimate {
        mu_h,
        sigma_h,
        delta_local: clamp_delta(raw, t),
        p2,
    })
}

/// Fits a Gaussian to the batch's pairwise distances and returns its
/// `p2`-quantile as the local sensitivity.
pub fn estimate_local_sensitivity(
    batch: &EmbeddingBatch,
    p2: f64,
    t: f64,
) -> Result<SensitivityEstimate> {
    if batch.rows() < 2 {
        return Err(Error::arg(format!(
            "sensitivity estimate needs at least 2 rows, got {}",
            batch.rows()
        )));
    }
    estimate_from_distances(&pairwise_distances(&batch.data)?, p2, t)
}

/// Uses the exact batch diameter as `Δ̃` (the quadratic-cost reference the
/// quantile estimate approximates).
pub fn exact_diameter_estimate(batch: &EmbeddingBatch, t: f64) -> Result<SensitivityEstimate> {
    check_threshold(t)?;
    let d = pairwise_distances(&batch.data)?;
    let (mu_h, sigma_h) = mean_and_sample_std(&d);
    let diameter = d.iter().copied().fold(0.0, f64::max);
    Ok(SensitivityEstimate {
        mu_h,
        sigma_h,
        delta_local: clamp_delta(diameter, t),
        p2: 1.0,
    })
}

/// Multiplies every row by `2t / Δ̃`, so the batch's spread fills the
/// sensitivity budget the noise was calibrated for.
pub fn rescale(batch: &EmbeddingBatch, est: &SensitivityEstimate, t: f64) -> EmbeddingBatch {
    batch.with_data(batch.data.scale(est.factor(t)))
}
