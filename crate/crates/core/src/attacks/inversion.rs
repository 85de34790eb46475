use log::warn;
use serde::{Deserialize, Serialize};

use super::{mean_and_se, AttackKind, AttackReport, Standardizer};
use crate::neural::{mse_loss, Activation, DenseNet, TrainingConfig};
use crate::numerics::{Matrix, Rng};
use crate::protocol::VflModel;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub trials: usize,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            learning_rate: 0.05,
            batch_size: 32,
            trials: 1,
            seed: 7,
        }
    }
}

/// Mirror of the extractor's widths: embedding → hidden (reversed) → input.
fn mirror_decoder(extractor: &DenseNet, rng: &mut Rng) -> Result<DenseNet> {
    let mut dims: Vec<usize> = extractor.layers().iter().map(|l| l.output_dim()).collect();
    dims.reverse();
    dims.push(extractor.input_dim());
    DenseNet::init(&dims, Activation::Tanh, Activation::Identity, rng)
}

fn train_decoder(
    released: &Matrix,
    target: &Matrix,
    extractor: &DenseNet,
    cfg: &DecoderConfig,
    rng: &mut Rng,
) -> Result<Option<DenseNet>> {
    let mut decoder = mirror_decoder(extractor, rng)?;
    let train_cfg = TrainingConfig {
        learning_rate: cfg.learning_rate,
        weight_decay: 0.0,
        ..TrainingConfig::default()
    };
    let n = released.rows();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let x = released.select_rows(chunk);
            let y = target.select_rows(chunk);
            let pred = decoder.forward(&x)?;
            let (loss, g) = mse_loss(&pred, &y)?;
            if !loss.is_finite() {
                return Ok(None);
            }
            let (grads, _) = decoder.backward(&g)?;
            decoder.sgd_step(&grads, &train_cfg)?;
        }
    }
    Ok(Some(decoder))
}

/// Trains a decoder from `party`'s released embeddings back to raw features
/// on the attacker's own rows, then reports reconstruction MSE on the
/// victim's held-out rows. Released embeddings are z-scored with statistics
/// of the attacker's rows. Diverged trials are counted and excluded.
pub fn inversion_attack(
    victim: &VflModel,
    party: usize,
    attacker_features: &Matrix,
    victim_features: &Matrix,
    cfg: &DecoderConfig,
    tag: &str,
) -> Result<AttackReport> {
    if attacker_features.rows() == 0 || victim_features.rows() == 0 {
        return Err(Error::arg("inversion attack needs attacker and victim rows"));
    }
    if cfg.trials == 0 {
        return Err(Error::arg("inversion attack needs at least one trial"));
    }
    let extractor = &victim
        .parties
        .get(party)
        .ok_or_else(|| Error::arg(format!("no party {party}")))?
        .extractor;
    let root = Rng::new(cfg.seed);
    let mut scores = Vec::with_capacity(cfg.trials);
    let mut failed = 0;
    for trial in 0..cfg.trials {
        let mut rng = root.derive(&[trial as u64]);
        let released = victim.release(party, attacker_features, true, &mut rng.derive(&[1]))?;
        let probe = victim.release(party, victim_features, true, &mut rng.derive(&[2]))?;
        let scaler = Standardizer::fit(&released);
        let inputs = scaler.apply(&released);
        match train_decoder(&inputs, attacker_features, extractor, cfg, &mut rng)? {
            Some(decoder) => {
                let (mse, _) = mse_loss(&decoder.predict(&scaler.apply(&probe))?, victim_features)?;
                if mse.is_finite() {
                    scores.push(mse);
                } else {
                    failed += 1;
                }
            }
            None => failed += 1,
        }
    }
    if failed > 0 {
        warn!("inversion attack on {tag}: {failed} of {} trials diverged", cfg.trials);
    }
    let (metric, std_error) = mean_and_se(&scores);
    Ok(AttackReport {
        kind: AttackKind::Inversion,
        victim: tag.to_string(),
        metric,
        std_error,
        trials: cfg.trials,
        failed_trials: failed,
        seed: cfg.seed,
    })
}
