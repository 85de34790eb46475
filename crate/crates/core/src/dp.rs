//! Norm clipping, Gaussian-mechanism calibration and privacy accounting for
//! released feature embeddings.
//!
//! Clipping every embedding to `‖h‖ ≤ t` bounds the disparity between any two
//! released rows by `2t`, which is used as the sensitivity estimate. Noise is
//! then added i.i.d. per coordinate with standard deviation `σ · 2t`, where
//! `σ = sqrt(2 ln(1.25/δ)) / ε`.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::numerics::{gaussian_sample, norm, normal_cdf, Matrix, Rng};
use crate::{Error, Result};

/// A batch of per-sample embeddings owned by one passive party.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingBatch {
    pub party: usize,
    pub batch_index: u64,
    pub data: Matrix,
}

impl EmbeddingBatch {
    pub fn new(party: usize, batch_index: u64, data: Matrix) -> Self {
        Self {
            party,
            batch_index,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.data.rows()
    }

    pub fn with_data(&self, data: Matrix) -> Self {
        Self {
            party: self.party,
            batch_index: self.batch_index,
            data,
        }
    }
}

/// User-facing privacy settings; [`PrivacySettings::resolve`] derives σ and δ′.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacySettings {
    pub epsilon: f64,
    pub delta: f64,
    pub clip_threshold: f64,
    /// Probability that the batch diameter equals the local sensitivity.
    #[serde(default = "one")]
    pub p1: f64,
    /// Confidence of the quantile-based sensitivity estimate.
    #[serde(default = "default_p2")]
    pub p2: f64,
    /// Accept ε ≥ 1, outside the range where the calibration is proven.
    #[serde(default)]
    pub allow_large_epsilon: bool,
}

fn one() -> f64 {
    1.0
}

fn default_p2() -> f64 {
    0.9987
}

impl Default for PrivacySettings {
    fn default() -> Self {
        Self {
            epsilon: 0.9,
            delta: 1e-2,
            clip_threshold: 1.0,
            p1: 1.0,
            p2: 0.9987,
            allow_large_epsilon: false,
        }
    }
}

impl PrivacySettings {
    pub fn resolve(&self) -> Result<PrivacyParams> {
        PrivacyParams::from_settings(self)
    }
}

/// Resolved per-party privacy record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    epsilon: f64,
    delta: f64,
    clip_threshold: f64,
    p1: f64,
    p2: f64,
    sigma: f64,
    delta_prime: f64,
    noise_disabled: bool,
}

impl PrivacyParams {
    /// Strict constructor: ε must lie in (0, 1).
    pub fn new(epsilon: f64, delta: f64, clip_threshold: f64, p1: f64, p2: f64) -> Result<Self> {
        Self::from_settings(&PrivacySettings {
            epsilon,
            delta,
            clip_threshold,
            p1,
            p2,
            allow_large_epsilon: false,
        })
    }

    pub fn from_settings(s: &PrivacySettings) -> Result<Self> {
        let sigma = if s.allow_large_epsilon && s.epsilon >= 1.0 {
            warn!(
                "epsilon = {} is outside (0, 1); the Gaussian calibration is not proven there",
                s.epsilon
            );
            sigma_formula(s.epsilon, s.delta)?
        } else {
            calibrate_sigma(s.epsilon, s.delta)?
        };
        if !(s.clip_threshold > 0.0) || !s.clip_threshold.is_finite() {
            return Err(Error::arg(format!(
                "clip threshold must be > 0, got {}",
                s.clip_threshold
            )));
        }
        for (name, p) in [("p1", s.p1), ("p2", s.p2)] {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::arg(format!("{name} must lie in (0, 1], got {p}")));
            }
        }
        let delta_prime = s.delta / (s.p1 * s.p2);
        if !(delta_prime < 1.0) {
            return Err(Error::arg(format!(
                "relaxed failure probability δ/(p1·p2) = {delta_prime} must be < 1"
            )));
        }
        Ok(Self {
            epsilon: s.epsilon,
            delta: s.delta,
            clip_threshold: s.clip_threshold,
            p1: s.p1,
            p2: s.p2,
            sigma,
            delta_prime,
            noise_disabled: false,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn clip_threshold(&self) -> f64 {
        self.clip_threshold
    }

    pub fn p1(&self) -> f64 {
        self.p1
    }

    pub fn p2(&self) -> f64 {
        self.p2
    }

    /// Noise multiplier σ (std of the noise in units of the sensitivity).
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// `δ / (p1 · p2)`, the failure probability once rescaling is active.
    pub fn delta_prime(&self) -> f64 {
        self.delta_prime
    }

    /// Sensitivity estimate `Δ̃ = 2t`.
    pub fn sensitivity(&self) -> f64 {
        2.0 * self.clip_threshold
    }

    /// Per-coordinate noise standard deviation `σ · 2t`.
    pub fn noise_std(&self) -> f64 {
        self.sigma * self.sensitivity()
    }

    pub fn noise_disabled(&self) -> bool {
        self.noise_disabled
    }

    /// Raises σ above its calibrated minimum; lowering it is rejected.
    pub fn with_sigma(mut self, sigma: f64) -> Result<Self> {
        if !(sigma >= self.sigma) {
            return Err(Error::arg(format!(
                "σ = {sigma} is below the calibrated minimum {}",
                self.sigma
            )));
        }
        self.sigma = sigma;
        Ok(self)
    }

    /// Testing hook: keep clipping but release embeddings without noise.
    /// The result carries no privacy guarantee.
    pub fn without_noise(mut self) -> Self {
        self.sigma = 0.0;
        self.noise_disabled = true;
        self
    }
}

fn sigma_formula(epsilon: f64, delta: f64) -> Result<f64> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::arg(format!("epsilon must be > 0, got {epsilon}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::arg(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok((2.0 * (1.25 / delta).ln()).sqrt() / epsilon)
}

/// Minimal compliant noise multiplier `sqrt(2 ln(1.25/δ)) / ε` for ε ∈ (0, 1).
pub fn calibrate_sigma(epsilon: f64, delta: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::arg(format!(
            "epsilon must lie in (0, 1) for the Gaussian calibration, got {epsilon}"
        )));
    }
    sigma_formula(epsilon, delta)
}

/// Scales every row to norm at most `t`: `h / max(1, ‖h‖/t)`.
pub fn clip_norm(batch: &EmbeddingBatch, t: f64) -> Result<EmbeddingBatch> {
    if !(t > 0.0) {
        return Err(Error::arg(format!("clip threshold must be > 0, got {t}")));
    }
    let mut data = batch.data.clone();
    for r in 0..data.rows() {
        let row = data.row_mut(r);
        let n = norm(row);
        if n > t {
            let factor = t / n;
            row.iter_mut().for_each(|v| *v *= factor);
            // rounding can leave the norm an ulp above t
            while norm(row) > t {
                row.iter_mut().for_each(|v| *v *= 1.0 - f64::EPSILON);
            }
        }
    }
    Ok(batch.with_data(data))
}

/// Vector-Jacobian product of [`clip_norm`]: maps a gradient w.r.t. the
/// clipped rows back to the unclipped rows `pre`.
///
/// Rows inside the ball pass through; for `‖h‖ > t` the Jacobian is
/// `(t/‖h‖)(I − h hᵀ/‖h‖²)`.
pub fn clip_backward(pre: &Matrix, grad: &Matrix, t: f64) -> Result<Matrix> {
    if pre.shape() != grad.shape() {
        return Err(Error::shape("clip_backward gradient/input shapes differ"));
    }
    let mut out = grad.clone();
    for r in 0..pre.rows() {
        let h = pre.row(r);
        let n = norm(h);
        if n > t {
            let g = grad.row(r);
            let radial: f64 = h.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() / (n * n);
            for ((o, hi), gi) in out.row_mut(r).iter_mut().zip(h).zip(g) {
                *o = (t / n) * (gi - radial * hi);
            }
        }
    }
    Ok(out)
}

/// Adds i.i.d. `N(0, (2tσ)²)` noise to every coordinate.
pub fn add_noise(batch: &EmbeddingBatch, params: &PrivacyParams, rng: &mut Rng) -> EmbeddingBatch {
    let std = params.noise_std();
    if std == 0.0 {
        return batch.clone();
    }
    let noise = gaussian_sample(rng, 0.0, std, batch.data.shape()).expect("std is non-negative");
    batch.with_data(batch.data.add(&noise).expect("same shape"))
}

/// Outcome of [`mechanism_ratio_check`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    /// `max_O P[A(x) ∈ O] − e^ε P[A(x′) ∈ O] − δ` over the tested events.
    pub max_violation: f64,
    pub worst_threshold: f64,
    /// Events whose violation exceeds the 1e-9 tolerance.
    pub violations: usize,
    pub events_checked: usize,
}

impl RatioReport {
    pub const TOLERANCE: f64 = 1e-9;

    pub fn passed(&self) -> bool {
        self.max_violation <= Self::TOLERANCE
    }
}

/// Checks the (ε, δ) inequality for the scalar Gaussian mechanism on two
/// neighbouring inputs `0` and `2t` (the clipped worst case), using the
/// closed-form normal CDF over half-line events `(−∞, o]` in both directions.
///
/// `trials` grid thresholds are spread over ±12 noise standard deviations;
/// the analytically worst threshold is always included.
pub fn mechanism_ratio_check(params: &PrivacyParams, trials: usize) -> RatioReport {
    gaussian_ratio_check(
        params.epsilon(),
        params.delta(),
        params.noise_std(),
        params.sensitivity(),
        trials,
    )
}

/// [`mechanism_ratio_check`] on raw parameters: noise std `noise_std`,
/// neighbouring outputs `0` and `disparity`.
pub fn gaussian_ratio_check(
    epsilon: f64,
    delta: f64,
    noise_std: f64,
    disparity: f64,
    trials: usize,
) -> RatioReport {
    let cdf = |o: f64, centre: f64| -> f64 {
        if noise_std == 0.0 {
            if o >= centre {
                1.0
            } else {
                0.0
            }
        } else {
            normal_cdf((o - centre) / noise_std)
        }
    };
    let mut thresholds = Vec::with_capacity(trials + 2);
    let span = 12.0 * noise_std.max(disparity.abs()).max(1e-12);
    let (lo, hi) = (-span, disparity + span);
    for i in 0..trials {
        let f = if trials > 1 { i as f64 / (trials - 1) as f64 } else { 0.5 };
        thresholds.push(lo + f * (hi - lo));
    }
    if disparity != 0.0 && noise_std > 0.0 {
        // privacy loss ln(p₀/p₁) exceeds ε exactly on (−∞, Δ/2 − s²ε/Δ]
        let worst = disparity / 2.0 - noise_std * noise_std * epsilon / disparity;
        thresholds.push(worst);
        // mirrored event for the opposite direction
        thresholds.push(disparity - worst);
    }
    let scale = epsilon.exp();
    let mut report = RatioReport {
        max_violation: f64::NEG_INFINITY,
        worst_threshold: f64::NAN,
        violations: 0,
        events_checked: 0,
    };
    for &o in &thresholds {
        let p0 = cdf(o, 0.0);
        let p1 = cdf(o, disparity);
        // (−∞, o] in both orders, and the complementary [o, ∞) events
        let candidates = [
            p0 - scale * p1 - delta,
            p1 - scale * p0 - delta,
            (1.0 - p0) - scale * (1.0 - p1) - delta,
            (1.0 - p1) - scale * (1.0 - p0) - delta,
        ];
        for v in candidates {
            report.events_checked += 1;
            if v > RatioReport::TOLERANCE {
                report.violations += 1;
            }
            if v > report.max_violation {
                report.max_violation = v;
                report.worst_threshold = o;
            }
        }
    }
    report
}
