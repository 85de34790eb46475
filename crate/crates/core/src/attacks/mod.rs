//! Attacks against released artifacts: feature inversion from embeddings
//! and shadow-model membership inference on predictions.

mod inversion;
mod membership;

use serde::{Deserialize, Serialize};

use crate::numerics::Matrix;

pub use inversion::{inversion_attack, DecoderConfig};
pub use membership::{attack_features, membership_inference, MiTarget, ShadowConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Inversion,
    MembershipInference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub kind: AttackKind,
    /// Which victim configuration was attacked.
    pub victim: String,
    /// Inversion: per-feature reconstruction MSE. Membership: attack accuracy
    /// on a balanced member/non-member set.
    pub metric: f64,
    pub std_error: f64,
    pub trials: usize,
    /// Trials discarded because training diverged.
    pub failed_trials: usize,
    pub seed: u64,
}

/// Per-column z-scoring fitted on the attacker's training inputs.
pub(crate) struct Standardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Standardizer {
    pub(crate) fn fit(x: &Matrix) -> Self {
        let n = x.rows().max(1) as f64;
        let mean: Vec<f64> = (0..x.cols()).map(|c| x.column(c).iter().sum::<f64>() / n).collect();
        let std = (0..x.cols())
            .map(|c| {
                let v = x.column(c).iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>() / n;
                if v > 1e-24 { v.sqrt() } else { 1.0 }
            })
            .collect();
        Self { mean, std }
    }

    pub(crate) fn apply(&self, x: &Matrix) -> Matrix {
        Matrix::from_fn(x.rows(), x.cols(), |r, c| (x[(r, c)] - self.mean[c]) / self.std[c])
    }
}

pub(crate) fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
