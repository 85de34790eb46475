//! The vertical federated training loop.
//!
//! Each round, every passive party embeds the aligned mini-batch, protects it
//! (clip, optional adaptive rescale, Gaussian noise) and sends it up; the
//! active party trains its head on the concatenation and sends each party the
//! gradient for its block; each passive party then updates its extractor,
//! optionally adding the distance-distribution and contrastive losses.

mod channel;
mod model;
mod party;

use serde::{Deserialize, Serialize};

pub use channel::{Channel, RoundMessage};
pub use model::{CheckpointFiles, PartyModel, VflModel};
pub use party::{
    ActiveParty, HeadStep, PassiveBuffers, PassiveParty, Protection, Stage, StageTimers,
};

use crate::adaptive::{purity, AdaptiveConfig};
use crate::data::VerticalDataset;
use crate::dp::EmbeddingBatch;
use crate::neural::{Activation, DenseNet, TrainingConfig};
use crate::numerics::Rng;
use crate::{Error, Result};

const INIT_STREAM: u64 = 1;
const PARTY_STREAM: u64 = 2;
const BATCH_STREAM: u64 = 3;
const EVAL_STREAM: u64 = 4;

/// Architecture, optimisation and protection settings for a federation.
#[derive(Clone, Debug, PartialEq)]
pub struct FederationConfig {
    pub embedding_dim: usize,
    pub extractor_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub activation: Activation,
    /// Output activation of each feature extractor.
    pub embedding_activation: Activation,
    pub training: TrainingConfig,
    /// Applied to every passive party (each with its own noise stream).
    pub protection: Protection,
    pub adaptive: AdaptiveConfig,
    /// Evaluate through the noisy release path.
    pub eval_noise: bool,
}

impl FederationConfig {
    pub fn new(training: TrainingConfig, protection: Protection, adaptive: AdaptiveConfig) -> Self {
        Self {
            embedding_dim: 16,
            extractor_hidden: vec![32],
            head_hidden: vec![],
            activation: Activation::Relu,
            embedding_activation: Activation::Identity,
            training,
            protection,
            adaptive,
            eval_noise: true,
        }
    }
}

/// Per-round diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u64,
    pub loss: f64,
    pub accuracy: f64,
    /// Estimated local sensitivity per party (absent without rescaling).
    pub delta_local: Vec<Option<f64>>,
    /// Mean purity of the confident cluster ids against the batch labels.
    pub purity: Option<f64>,
    pub purity_unfiltered: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub loss: f64,
    pub mean_delta: Option<f64>,
    pub purity: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub rounds: Vec<RoundMetrics>,
}

impl History {
    pub fn final_test_acc(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.test_acc)
    }
}

/// `n` distinct indices out of `0..total`, uniformly without replacement.
pub fn sample_aligned_batch(total: usize, n: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if n > total {
        return Err(Error::arg(format!("batch of {n} from only {total} samples")));
    }
    Ok(rng.sample_indices(total, n))
}

/// All parties of one federated model plus the channel between them.
#[derive(Debug)]
pub struct Federation {
    passive: Vec<PassiveParty>,
    active: ActiveParty,
    channel: Channel,
    config: FederationConfig,
    rows: usize,
    round: u64,
    batch_rng: Rng,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl Federation {
    /// Fresh networks initialised from `config.training.seed`.
    pub fn new(train: &VerticalDataset, config: FederationConfig) -> Result<Self> {
        let root = Rng::new(config.training.seed);
        let extractors = train
            .party_dims()
            .iter()
            .enumerate()
            .map(|(p, &d)| {
                let mut dims = vec![d];
                dims.extend(&config.extractor_hidden);
                dims.push(config.embedding_dim);
                let mut rng = root.derive(&[INIT_STREAM, p as u64]);
                DenseNet::init(&dims, config.activation, config.embedding_activation, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut dims = vec![config.embedding_dim * train.parties.len()];
        dims.extend(&config.head_hidden);
        dims.push(train.num_classes);
        let mut rng = root.derive(&[INIT_STREAM, u64::MAX]);
        let head = DenseNet::init(&dims, config.activation, Activation::Identity, &mut rng)?;
        Self::with_networks(train, config, extractors, head)
    }

    /// Federation with caller-supplied networks.
    pub fn with_networks(
        train: &VerticalDataset,
        config: FederationConfig,
        extractors: Vec<DenseNet>,
        head: DenseNet,
    ) -> Result<Self> {
        config.training.validate()?;
        if extractors.len() != train.parties.len() {
            return Err(Error::arg(format!(
                "{} extractors for {} parties",
                extractors.len(),
                train.parties.len()
            )));
        }
        let width: usize = extractors.iter().map(DenseNet::output_dim).sum();
        if head.input_dim() != width {
            return Err(Error::shape(format!(
                "head input {} vs concatenated embedding width {width}",
                head.input_dim()
            )));
        }
        let root = Rng::new(config.training.seed);
        let passive = extractors
            .into_iter()
            .enumerate()
            .map(|(p, net)| {
                PassiveParty::new(
                    p,
                    train.parties[p].clone(),
                    net,
                    config.protection.clone(),
                    config.adaptive.clone(),
                    config.training.clone(),
                    root.derive(&[PARTY_STREAM, p as u64]),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let active = ActiveParty::new(head, train.labels.clone(), config.training.clone());
        Ok(Self {
            passive,
            active,
            channel: Channel::default(),
            rows: train.rows(),
            round: 0,
            batch_rng: root.derive(&[BATCH_STREAM]),
            config,
        })
    }

    pub fn config(&self) -> &FederationConfig {
        &self.config
    }

    pub fn passive(&self) -> &[PassiveParty] {
        &self.passive
    }

    pub fn active(&self) -> &ActiveParty {
        &self.active
    }

    pub fn channel_mut(&mut self) -> &mut Channel {
        &mut self.channel
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    /// Stage timings summed over all parties.
    pub fn timers(&self) -> StageTimers {
        let mut total = *self.active.timers();
        for p in &self.passive {
            total.merge(p.timers());
        }
        total
    }

    /// One communication round on the aligned rows `indices`.
    pub fn run_round(&mut self, indices: &[usize]) -> Result<RoundMetrics> {
        let round = self.round;
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.rows) {
            return Err(Error::arg(format!("index {bad} outside {} aligned rows", self.rows)));
        }
        for party in &mut self.passive {
            let batch = party.embed(indices, round)?;
            self.channel.send(RoundMessage::EmbeddingUp {
                party: party.id(),
                batch_index: round,
                batch,
            });
        }
        let mut inbox = self.channel.drain();
        let mut received: Vec<EmbeddingBatch> = Vec::with_capacity(self.passive.len());
        for party in &self.passive {
            let pos = inbox.iter().position(|m| {
                matches!(m, RoundMessage::EmbeddingUp { .. })
                    && m.party() == party.id()
                    && m.batch_index() == round
            });
            match pos.map(|i| inbox.swap_remove(i)) {
                Some(RoundMessage::EmbeddingUp { batch, .. }) => received.push(batch),
                _ => {
                    return Err(Error::Protocol {
                        round,
                        party: party.id(),
                        detail: "embedding message missing".into(),
                    })
                }
            }
        }
        received.sort_by_key(|b| b.party);
        let refs: Vec<&EmbeddingBatch> = received.iter().collect();
        let step = self.active.step(&refs, indices)?;
        for (batch, grad) in received.iter().zip(step.grads) {
            self.channel.send(RoundMessage::GradientDown {
                party: batch.party,
                batch_index: round,
                grad,
            });
        }
        let mut inbox = self.channel.drain();
        for party in &mut self.passive {
            let pos = inbox.iter().position(|m| {
                matches!(m, RoundMessage::GradientDown { .. })
                    && m.party() == party.id()
                    && m.batch_index() == round
            });
            match pos.map(|i| inbox.swap_remove(i)) {
                Some(RoundMessage::GradientDown { grad, .. }) => party.apply_gradient(&grad, round)?,
                _ => {
                    return Err(Error::Protocol {
                        round,
                        party: party.id(),
                        detail: "gradient message missing".into(),
                    })
                }
            }
        }

        // diagnostics use the labels, so they are computed here, not by the parties
        let labels = self.active.labels_at(indices);
        let assignments: Vec<_> = self
            .passive
            .iter()
            .filter_map(|p| p.buffers().assignment.as_ref())
            .collect();
        let filtered = mean(assignments.iter().filter_map(|a| purity(a, &labels, true).ok()));
        let unfiltered = mean(assignments.iter().filter_map(|a| purity(a, &labels, false).ok()));
        self.round += 1;
        Ok(RoundMetrics {
            round,
            loss: step.loss,
            accuracy: step.accuracy,
            delta_local: self
                .passive
                .iter()
                .map(|p| p.buffers().estimate.as_ref().map(|e| e.delta_local))
                .collect(),
            purity: filtered,
            purity_unfiltered: unfiltered,
        })
    }

    /// Draws the next aligned batch and runs a round on it.
    pub fn step(&mut self) -> Result<RoundMetrics> {
        let n = self.config.training.batch_size.min(self.rows);
        let indices = sample_aligned_batch(self.rows, n, &mut self.batch_rng)?;
        self.run_round(&indices)
    }

    /// Deployable snapshot of the current networks.
    pub fn model(&self) -> VflModel {
        VflModel {
            parties: self
                .passive
                .iter()
                .map(|p| PartyModel {
                    extractor: p.extractor().clone(),
                    protection: p.protection().clone(),
                    rescale: p.adaptive().rescale && matches!(p.protection(), Protection::Dp(_)),
                    p2: p.adaptive().p2,
                })
                .collect(),
            head: self.active.head().clone(),
            batch_size: self.config.training.batch_size,
        }
    }

    /// Accuracy on `data` through the release path, with noise per config.
    pub fn evaluate(&self, data: &VerticalDataset, tag: u64) -> Result<f64> {
        let mut rng = Rng::new(self.config.training.seed).derive(&[EVAL_STREAM, tag]);
        self.model().accuracy(data, self.config.eval_noise, &mut rng)
    }
}

/// Runs the configured number of epochs; an epoch is `⌈N / n⌉` rounds.
pub fn train(fed: &mut Federation, test: Option<&VerticalDataset>) -> Result<History> {
    let mut history = History::default();
    let epochs = fed.config.training.epochs;
    let n = fed.config.training.batch_size.min(fed.rows).max(1);
    let rounds_per_epoch = fed.rows.div_ceil(n);
    for epoch in 1..=epochs {
        let mut rounds = Vec::with_capacity(rounds_per_epoch);
        for _ in 0..rounds_per_epoch {
            rounds.push(fed.step()?);
        }
        let test_acc = test.map(|t| fed.evaluate(t, epoch as u64)).transpose()?;
        history.epochs.push(EpochRecord {
            epoch,
            train_acc: mean(rounds.iter().map(|r| r.accuracy)).unwrap_or(0.0),
            test_acc,
            loss: mean(rounds.iter().map(|r| r.loss)).unwrap_or(0.0),
            mean_delta: mean(rounds.iter().flat_map(|r| r.delta_local.iter().flatten().copied())),
            purity: mean(rounds.iter().filter_map(|r| r.purity)),
        });
        history.rounds.extend(rounds);
    }
    Ok(history)
}
