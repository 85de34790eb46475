use std::time::{Duration, Instant};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::adaptive::{
    contrastive_loss, estimate_local_sensitivity, fcm, kl_loss, rescale, AdaptiveConfig,
    FuzzyAssignment, SensitivityEstimate,
};
use crate::dp::{add_noise, clip_backward, clip_norm, EmbeddingBatch, PrivacyParams};
use crate::neural::{accuracy, cross_entropy_softmax, DenseNet, TrainingConfig};
use crate::numerics::{Matrix, Rng};
use crate::{Error, Result};

/// What a passive party does to its embeddings before release.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Protection {
    /// Raw embeddings leave the party.
    Unprotected,
    /// Norm clipping plus the calibrated Gaussian mechanism.
    Dp(PrivacyParams),
}

impl Protection {
    pub fn params(&self) -> Option<&PrivacyParams> {
        match self {
            Protection::Unprotected => None,
            Protection::Dp(p) => Some(p),
        }
    }
}

/// Pipeline stages a passive party's buffer passes through in one round.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Stage {
    Clipped { max_norm: f64 },
    Rescaled { factor: f64 },
    Noised,
}

/// Wall time spent per pipeline stage.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTimers {
    /// Forward/backward passes, clipping and SGD updates.
    pub base: Duration,
    pub noise: Duration,
    /// Sensitivity estimation, rescaling and the distance-distribution loss.
    pub rescale: Duration,
    /// Gradient clustering and the contrastive loss.
    pub dist_adjust: Duration,
}

impl StageTimers {
    pub fn total(&self) -> Duration {
        self.base + self.noise + self.rescale + self.dist_adjust
    }

    /// Time accumulated since the snapshot `earlier`.
    pub fn since(&self, earlier: &StageTimers) -> StageTimers {
        StageTimers {
            base: self.base.saturating_sub(earlier.base),
            noise: self.noise.saturating_sub(earlier.noise),
            rescale: self.rescale.saturating_sub(earlier.rescale),
            dist_adjust: self.dist_adjust.saturating_sub(earlier.dist_adjust),
        }
    }

    pub fn merge(&mut self, other: &StageTimers) {
        self.base += other.base;
        self.noise += other.noise;
        self.rescale += other.rescale;
        self.dist_adjust += other.dist_adjust;
    }
}

fn timed<T>(slot: &mut Duration, f: impl FnOnce() -> T) -> T {
    let start = Instant::now();
    let out = f();
    *slot += start.elapsed();
    out
}

/// Output of the release pipeline for one batch.
#[derive(Clone, Debug)]
pub(crate) struct Released {
    /// Clipped, pre-noise embeddings (raw embeddings when unprotected).
    pub clipped: Matrix,
    pub factor: f64,
    pub estimate: Option<SensitivityEstimate>,
    pub noisy: EmbeddingBatch,
    pub stages: Vec<Stage>,
}

/// clip → (estimate → rescale) → noise.
pub(crate) fn release_pipeline(
    raw: EmbeddingBatch,
    protection: &Protection,
    adaptive_rescale: bool,
    p2: f64,
    rng: &mut Rng,
    timers: &mut StageTimers,
) -> Result<Released> {
    let params = match protection {
        Protection::Unprotected => {
            return Ok(Released {
                clipped: raw.data.clone(),
                factor: 1.0,
                estimate: None,
                noisy: raw,
                stages: Vec::new(),
            })
        }
        Protection::Dp(p) => p,
    };
    let t = params.clip_threshold();
    let mut stages = Vec::with_capacity(3);
    let clipped = timed(&mut timers.base, || clip_norm(&raw, t))?;
    let max_norm = clipped.data.row_norms().into_iter().fold(0.0, f64::max);
    stages.push(Stage::Clipped { max_norm });

    let mut factor = 1.0;
    let mut estimate = None;
    let mut scaled = clipped.clone();
    if adaptive_rescale && clipped.rows() >= 2 {
        let est = timed(&mut timers.rescale, || estimate_local_sensitivity(&clipped, p2, t))?;
        factor = est.factor(t);
        scaled = timed(&mut timers.rescale, || rescale(&clipped, &est, t));
        stages.push(Stage::Rescaled { factor });
        estimate = Some(est);
    }
    let noisy = timed(&mut timers.noise, || add_noise(&scaled, params, rng));
    stages.push(Stage::Noised);
    Ok(Released {
        clipped: clipped.data,
        factor,
        estimate,
        noisy,
        stages,
    })
}

/// Per-round scratch state of a passive party.
#[derive(Clone, Debug, Default)]
pub struct PassiveBuffers {
    pub clipped: Option<Matrix>,
    pub factor: f64,
    pub estimate: Option<SensitivityEstimate>,
    pub assignment: Option<FuzzyAssignment>,
    pub stages: Vec<Stage>,
}

/// A feature-holding party: owns its columns, extractor and privacy setup.
#[derive(Debug)]
pub struct PassiveParty {
    id: usize,
    features: Matrix,
    extractor: DenseNet,
    protection: Protection,
    adaptive: AdaptiveConfig,
    training: TrainingConfig,
    rng: Rng,
    buffers: PassiveBuffers,
    timers: StageTimers,
}

impl PassiveParty {
    pub fn new(
        id: usize,
        features: Matrix,
        extractor: DenseNet,
        protection: Protection,
        adaptive: AdaptiveConfig,
        training: TrainingConfig,
        rng: Rng,
    ) -> Result<Self> {
        if extractor.input_dim() != features.cols() {
            return Err(Error::shape(format!(
                "party {id}: extractor expects {} features, party holds {}",
                extractor.input_dim(),
                features.cols()
            )));
        }
        Ok(Self {
            id,
            features,
            extractor,
            protection,
            adaptive,
            training,
            rng,
            buffers: PassiveBuffers::default(),
            timers: StageTimers::default(),
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn extractor(&self) -> &DenseNet {
        &self.extractor
    }

    pub fn protection(&self) -> &Protection {
        &self.protection
    }

    pub fn adaptive(&self) -> &AdaptiveConfig {
        &self.adaptive
    }

    pub fn buffers(&self) -> &PassiveBuffers {
        &self.buffers
    }

    pub fn timers(&self) -> &StageTimers {
        &self.timers
    }

    pub fn rows(&self) -> usize {
        self.features.rows()
    }

    fn rescale_on(&self) -> bool {
        self.adaptive.rescale && matches!(self.protection, Protection::Dp(_))
    }

    fn dist_adjust_on(&self) -> bool {
        self.adaptive.dist_adjust && matches!(self.protection, Protection::Dp(_))
    }

    /// Forward pass on the aligned rows and the release pipeline.
    pub fn embed(&mut self, indices: &[usize], batch_index: u64) -> Result<EmbeddingBatch> {
        self.buffers = PassiveBuffers::default();
        let x = self.features.select_rows(indices);
        let h = timed(&mut self.timers.base, || self.extractor.forward(&x))?;
        let raw = EmbeddingBatch::new(self.id, batch_index, h);
        let rescale_on = self.rescale_on();
        let out = release_pipeline(
            raw,
            &self.protection,
            rescale_on,
            self.adaptive.p2,
            &mut self.rng,
            &mut self.timers,
        )?;
        self.buffers.clipped = Some(out.clipped);
        self.buffers.factor = out.factor;
        self.buffers.estimate = out.estimate;
        self.buffers.stages = out.stages;
        Ok(out.noisy)
    }

    /// Local update from the returned gradient plus the auxiliary losses,
    /// which act on the buffered pre-noise clipped embeddings.
    pub fn apply_gradient(&mut self, grad: &Matrix, batch_index: u64) -> Result<()> {
        let clipped = self
            .buffers
            .clipped
            .clone()
            .ok_or_else(|| Error::State(format!("party {}: gradient before embedding", self.id)))?;
        if grad.shape() != clipped.shape() {
            return Err(Error::shape(format!(
                "party {}: gradient {:?} vs embeddings {:?}",
                self.id,
                grad.shape(),
                clipped.shape()
            )));
        }
        // the rescale factor is a batch statistic and is not differentiated
        let mut total = grad.scale(self.buffers.factor);
        let batch = EmbeddingBatch::new(self.id, batch_index, clipped);

        if self.rescale_on() && self.training.alpha > 0.0 && batch.rows() >= 4 {
            let (alpha, mode) = (self.training.alpha, self.adaptive.kl_mode);
            let (_, g) = timed(&mut self.timers.rescale, || kl_loss(&batch, alpha, mode))?;
            total.add_assign(&g)?;
        }
        if self.dist_adjust_on() {
            let (fcm_cfg, beta) = (self.adaptive.fcm.clone(), self.training.beta);
            let rng = &mut self.rng;
            let start = Instant::now();
            if grad.rows() >= fcm_cfg.clusters {
                let clusters = fcm(grad, &fcm_cfg, rng)?;
                let (_, g) = contrastive_loss(&batch, &clusters.assignment, beta)?;
                total.add_assign(&g)?;
                self.buffers.assignment = Some(clusters.assignment);
            } else {
                warn!(
                    "party {}: batch of {} rows too small for {} clusters",
                    self.id,
                    grad.rows(),
                    fcm_cfg.clusters
                );
            }
            self.timers.dist_adjust += start.elapsed();
        }

        let start = Instant::now();
        let upstream = match &self.protection {
            Protection::Dp(p) => {
                let pre = self.extractor_output()?;
                clip_backward(&pre, &total, p.clip_threshold())?
            }
            Protection::Unprotected => total,
        };
        let (grads, _) = self.extractor.backward(&upstream)?;
        self.extractor.sgd_step(&grads, &self.training)?;
        self.timers.base += start.elapsed();
        Ok(())
    }

    fn extractor_output(&self) -> Result<Matrix> {
        self.extractor.cached_output().cloned().ok_or_else(|| {
            Error::State(format!("party {}: no cached forward pass", self.id))
        })
    }
}

/// The label-holding party with the classification head.
#[derive(Debug)]
pub struct ActiveParty {
    head: DenseNet,
    labels: Vec<usize>,
    training: TrainingConfig,
    timers: StageTimers,
}

/// Result of one head update.
#[derive(Clone, Debug)]
pub struct HeadStep {
    pub loss: f64,
    pub accuracy: f64,
    /// Gradient for each received batch, in the order received.
    pub grads: Vec<Matrix>,
}

impl ActiveParty {
    pub fn new(head: DenseNet, labels: Vec<usize>, training: TrainingConfig) -> Self {
        Self {
            head,
            labels,
            training,
            timers: StageTimers::default(),
        }
    }

    pub fn head(&self) -> &DenseNet {
        &self.head
    }

    pub fn timers(&self) -> &StageTimers {
        &self.timers
    }

    /// Concatenates the batches (already ordered by party id), takes one SGD
    /// step on the head and returns per-party input gradients, computed
    /// before the update.
    pub fn step(&mut self, batches: &[&EmbeddingBatch], indices: &[usize]) -> Result<HeadStep> {
        let start = Instant::now();
        let blocks: Vec<&Matrix> = batches.iter().map(|b| &b.data).collect();
        let joined = Matrix::hconcat(&blocks)?;
        if joined.cols() != self.head.input_dim() {
            return Err(Error::shape(format!(
                "head expects {} inputs, parties sent {}",
                self.head.input_dim(),
                joined.cols()
            )));
        }
        let labels: Vec<usize> = indices.iter().map(|&i| self.labels[i]).collect();
        let logits = self.head.forward(&joined)?;
        let (loss, g) = cross_entropy_softmax(&logits, &labels)?;
        let acc = accuracy(&logits, &labels);
        let (grads, input_grad) = self.head.backward(&g)?;
        self.head.sgd_step(&grads, &self.training)?;
        let mut offset = 0;
        let mut out = Vec::with_capacity(batches.len());
        for b in batches {
            let w = b.data.cols();
            out.push(input_grad.select_cols(offset..offset + w));
            offset += w;
        }
        self.timers.base += start.elapsed();
        Ok(HeadStep {
            loss,
            accuracy: acc,
            grads: out,
        })
    }

    pub(crate) fn labels_at(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}
