//! Small feedforward networks with exact manual backpropagation.
//!
//! These serve as passive-party feature extractors, the active party's head,
//! and the decoder / attack models used by [`crate::attacks`]. Images are
//! flattened; there are no convolutions.

pub mod checkpoint;
mod loss;
mod network;

use serde::{Deserialize, Serialize};

pub use loss::{accuracy, cross_entropy_softmax, mse_loss};
pub use network::{softmax, Activation, DenseNet, Gradients, Layer, LayerGrad};

use crate::{Error, Result};

/// Optimisation hyper-parameters shared by every party.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    /// Weight of the `½‖θ‖²` regulariser.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight of the distance-distribution (KL surrogate) loss.
    pub alpha: f64,
    /// Weight of the contrastive loss.
    pub beta: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            weight_decay: 1e-4,
            batch_size: 64,
            epochs: 20,
            alpha: 0.01,
            beta: 0.5,
            seed: 1,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::arg(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::arg(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::arg(format!(
                "batch size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::arg("loss weights alpha and beta must be >= 0"));
        }
        Ok(())
    }
}
