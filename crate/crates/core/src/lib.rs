//! Differentially private vertical federated learning with adaptive feature
//! embeddings.
//!
//! Passive parties map their local feature columns to embeddings, clip them to
//! a norm bound, optionally rescale them so the batch fills the sensitivity
//! budget, and release them with calibrated Gaussian noise. The active party
//! trains a head on the concatenated noisy embeddings and returns
//! per-embedding gradients, which passive parties also cluster (fuzzy c-means)
//! to drive a weakly supervised contrastive objective.
//!
//! Module map:
//!
//! - [`numerics`]: dense matrices, seeded RNG streams, special functions
//! - [`neural`]: small dense networks with manual backprop
//! - [`dp`]: clipping, noise calibration, privacy accounting
//! - [`adaptive`]: local sensitivity, rescaling, KL surrogate, FCM, contrastive loss
//! - [`protocol`]: parties, round messages, the training loop
//! - [`data`]: CSV / IDX loading, vertical partitioning, synthetic blobs
//! - [`attacks`]: feature inversion and shadow-model membership inference
//! - [`cli`]: config-driven experiment runner

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptive;
pub mod attacks;
pub mod cli;
pub mod data;
pub mod dp;
mod error;
pub mod neural;
pub mod numerics;
pub mod protocol;

pub use error::{Error, Result};
