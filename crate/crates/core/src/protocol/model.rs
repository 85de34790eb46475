use std::path::Path;

use serde::{Deserialize, Serialize};

use super::party::{release_pipeline, Protection, StageTimers};
use crate::data::VerticalDataset;
use crate::dp::EmbeddingBatch;
use crate::neural::{accuracy, checkpoint, softmax, DenseNet};
use crate::numerics::{Matrix, Rng};
use crate::{Error, Result};

/// A passive party's deployed release path.
#[derive(Clone, Debug, PartialEq)]
pub struct PartyModel {
    pub extractor: DenseNet,
    pub protection: Protection,
    pub rescale: bool,
    pub p2: f64,
}

/// Snapshot of a trained federation used for evaluation and attacks.
#[derive(Clone, Debug, PartialEq)]
pub struct VflModel {
    pub parties: Vec<PartyModel>,
    pub head: DenseNet,
    /// Rows per release batch; sensitivity is estimated per batch.
    pub batch_size: usize,
}

/// Checkpoint file names inside a run's `checkpoints/` directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointFiles {
    pub extractors: Vec<String>,
    pub head: String,
}

impl CheckpointFiles {
    pub fn for_parties(parties: usize) -> Self {
        Self {
            extractors: (0..parties).map(|p| format!("extractor_{p}.bin")).collect(),
            head: "head.bin".into(),
        }
    }
}

/// Splits `n` rows into consecutive chunks of `size`, folding a trailing
/// single row into the previous chunk (sensitivity needs two rows).
pub(crate) fn chunks(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let size = size.max(2);
    let mut out: Vec<std::ops::Range<usize>> = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + size).min(n);
        out.push(start..end);
        start = end;
    }
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").end = last.end;
    }
    out
}

impl VflModel {
    /// Released embeddings of `party` for `features`, batch by batch.
    /// With `noise` false the DP noise is skipped (diagnostics only).
    pub fn release(&self, party: usize, features: &Matrix, noise: bool, rng: &mut Rng) -> Result<Matrix> {
        let model = self
            .parties
            .get(party)
            .ok_or_else(|| Error::arg(format!("no party {party}")))?;
        let protection = match (&model.protection, noise) {
            (Protection::Dp(p), false) => Protection::Dp(p.clone().without_noise()),
            (p, _) => p.clone(),
        };
        let mut timers = StageTimers::default();
        let mut blocks = Vec::new();
        for (i, range) in chunks(features.rows(), self.batch_size).into_iter().enumerate() {
            let idx: Vec<usize> = range.collect();
            let h = model.extractor.predict(&features.select_rows(&idx))?;
            let mut chunk_rng = rng.derive(&[party as u64, i as u64]);
            let out = release_pipeline(
                EmbeddingBatch::new(party, i as u64, h),
                &protection,
                model.rescale,
                model.p2,
                &mut chunk_rng,
                &mut timers,
            )?;
            blocks.push(out.noisy.data);
        }
        if blocks.is_empty() {
            return Ok(Matrix::zeros(0, model.extractor.output_dim()));
        }
        let refs: Vec<&Matrix> = blocks.iter().collect();
        Matrix::vconcat(&refs)
    }

    /// Class probabilities for every row of `data`, through the release path.
    pub fn predict_proba(&self, data: &VerticalDataset, noise: bool, rng: &mut Rng) -> Result<Matrix> {
        if data.parties.len() != self.parties.len() {
            return Err(Error::arg(format!(
                "model has {} parties, dataset {}",
                self.parties.len(),
                data.parties.len()
            )));
        }
        let released: Vec<Matrix> = data
            .parties
            .iter()
            .enumerate()
            .map(|(p, x)| self.release(p, x, noise, rng))
            .collect::<Result<_>>()?;
        let refs: Vec<&Matrix> = released.iter().collect();
        let logits = self.head.predict(&Matrix::hconcat(&refs)?)?;
        Ok(softmax(&logits))
    }

    pub fn accuracy(&self, data: &VerticalDataset, noise: bool, rng: &mut Rng) -> Result<f64> {
        Ok(accuracy(&self.predict_proba(data, noise, rng)?, &data.labels))
    }

    /// Writes every network into `dir` using [`CheckpointFiles::for_parties`].
    pub fn save_checkpoints(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = CheckpointFiles::for_parties(self.parties.len());
        for (p, name) in self.parties.iter().zip(&files.extractors) {
            checkpoint::save(&p.extractor, &dir.join(name))?;
        }
        checkpoint::save(&self.head, &dir.join(&files.head))
    }

    /// Restores the networks from `dir`; the release settings come from the
    /// caller (they live in the run's config, not the checkpoint).
    pub fn load_checkpoints(
        dir: &Path,
        settings: Vec<(Protection, bool, f64)>,
        batch_size: usize,
    ) -> Result<Self> {
        let files = CheckpointFiles::for_parties(settings.len());
        let parties = settings
            .into_iter()
            .zip(&files.extractors)
            .map(|((protection, rescale, p2), name)| {
                Ok(PartyModel {
                    extractor: checkpoint::load(&dir.join(name))?,
                    protection,
                    rescale,
                    p2,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            parties,
            head: checkpoint::load(&dir.join(&files.head))?,
            batch_size,
        })
    }
}
