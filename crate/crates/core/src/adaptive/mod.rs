//! Utility recovery for DP-protected embeddings.
//!
//! Adaptive rescaling stretches each clipped batch so its estimated local
//! sensitivity fills the `2t` budget the noise is calibrated for. Distribution
//! adjustment clusters the gradients a passive party receives with fuzzy
//! c-means and uses the confident cluster ids as weak labels for a
//! contrastive loss on the party's embeddings.

mod contrastive;
mod fcm;
mod kl;
mod sensitivity;

use serde::{Deserialize, Serialize};

pub use contrastive::contrastive_loss;
pub use fcm::{fcm, purity, FcmConfig, FcmResult, FuzzyAssignment};
pub use kl::{kl_loss, kl_surrogate_loss, KlMode};
pub use sensitivity::{
    estimate_from_distances, estimate_local_sensitivity, exact_diameter_estimate, rescale,
    SensitivityEstimate,
};

use crate::numerics::{pair_index, Matrix};

/// Per-party switches and parameters for the two techniques.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptiveConfig {
    /// Adaptive rescaling (with the distance-distribution loss).
    pub rescale: bool,
    /// Gradient clustering plus contrastive loss.
    pub dist_adjust: bool,
    pub p2: f64,
    pub kl_mode: KlMode,
    pub fcm: FcmConfig,
}

impl AdaptiveConfig {
    pub fn new(rescale: bool, dist_adjust: bool, clusters: usize) -> Self {
        Self {
            rescale,
            dist_adjust,
            p2: 0.9987,
            kl_mode: KlMode::Moments,
            fcm: FcmConfig::new(clusters),
        }
    }
}

/// Chain rule from per-pair distance gradients to row gradients:
/// `∂d_jk/∂h_j = (h_j − h_k)/d_jk`. Coincident rows get a zero subgradient.
pub(crate) fn distance_grad_to_batch(batch: &Matrix, dist: &[f64], dgrad: &[f64]) -> Matrix {
    let n = batch.rows();
    let mut grad = Matrix::zeros(n, batch.cols());
    for j in 0..n {
        for k in j + 1..n {
            let idx = pair_index(n, j, k);
            let d = dist[idx];
            if d == 0.0 || dgrad[idx] == 0.0 {
                continue;
            }
            let coef = dgrad[idx] / d;
            for c in 0..batch.cols() {
                let diff = batch[(j, c)] - batch[(k, c)];
                grad.row_mut(j)[c] += coef * diff;
                grad.row_mut(k)[c] -= coef * diff;
            }
        }
    }
    grad
}

#[cfg(test)]
mod tests;
