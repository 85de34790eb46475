use serde::{Deserialize, Serialize};

use super::{AttackKind, AttackReport, Standardizer};
use crate::data::VerticalDataset;
use crate::neural::{accuracy, cross_entropy_softmax, Activation, DenseNet, TrainingConfig};
use crate::numerics::{Matrix, Rng};
use crate::protocol::VflModel;
use crate::{Error, Result};

/// What the membership attacker observes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiTarget {
    /// Final class probabilities.
    #[default]
    Predictions,
    /// Released embeddings of every party, with the true label.
    Embeddings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShadowConfig {
    pub shadows: usize,
    /// Members (and as many non-members) per shadow model.
    pub shadow_size: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub target: MiTarget,
}

impl Default for ShadowConfig {
    fn default() -> Self {
        Self {
            shadows: 4,
            shadow_size: 200,
            hidden: 32,
            epochs: 300,
            learning_rate: 0.05,
            seed: 11,
            target: MiTarget::Predictions,
        }
    }
}

/// Per-row attack inputs from class probabilities: the true-class
/// probability, all probabilities sorted descending, and `ln p_true`.
pub fn attack_features(probs: &Matrix, labels: &[usize]) -> Matrix {
    let c = probs.cols();
    Matrix::from_fn(probs.rows(), c + 2, {
        let sorted: Vec<Vec<f64>> = probs
            .row_iter()
            .map(|r| {
                let mut v = r.to_vec();
                v.sort_by(|a, b| b.total_cmp(a));
                v
            })
            .collect();
        move |r, k| {
            let p_true = probs[(r, labels[r])];
            match k {
                0 => p_true,
                k if k <= c => sorted[r][k - 1],
                _ => (p_true + 1e-12).ln(),
            }
        }
    })
}

fn observe(model: &VflModel, data: &VerticalDataset, target: MiTarget, rng: &mut Rng) -> Result<Matrix> {
    match target {
        MiTarget::Predictions => Ok(attack_features(&model.predict_proba(data, true, rng)?, &data.labels)),
        MiTarget::Embeddings => {
            let mut blocks = Vec::with_capacity(data.parties.len() + 1);
            for (p, x) in data.parties.iter().enumerate() {
                blocks.push(model.release(p, x, true, rng)?);
            }
            blocks.push(Matrix::from_fn(data.rows(), data.num_classes, |r, k| {
                f64::from(u8::from(data.labels[r] == k))
            }));
            let refs: Vec<&Matrix> = blocks.iter().collect();
            Matrix::hconcat(&refs)
        }
    }
}

/// Shadow-model membership inference.
///
/// `train_shadow` trains a model mimicking the victim's pipeline on the given
/// rows. Each of the `k` shadows is trained on rows drawn from
/// `attacker_pool`, with an equal number of held-out rows as non-members;
/// their observations train a one-hidden-layer attack classifier, which is
/// scored on a balanced set of the victim's members and non-members.
pub fn membership_inference(
    victim: &VflModel,
    members: &VerticalDataset,
    non_members: &VerticalDataset,
    attacker_pool: &VerticalDataset,
    train_shadow: &mut dyn FnMut(&VerticalDataset, u64) -> Result<VflModel>,
    cfg: &ShadowConfig,
    tag: &str,
) -> Result<AttackReport> {
    if cfg.shadows < 2 {
        return Err(Error::arg(format!("need at least 2 shadow models, got {}", cfg.shadows)));
    }
    let size = cfg.shadow_size.min(attacker_pool.rows() / 2);
    if size == 0 {
        return Err(Error::arg("attacker pool too small for shadow training"));
    }
    let root = Rng::new(cfg.seed);
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for s in 0..cfg.shadows {
        let mut rng = root.derive(&[s as u64]);
        let idx = rng.sample_indices(attacker_pool.rows(), 2 * size);
        let inside = attacker_pool.select(&idx[..size]);
        let outside = attacker_pool.select(&idx[size..]);
        let shadow = train_shadow(&inside, cfg.seed.wrapping_add(1 + s as u64))?;
        inputs.push(observe(&shadow, &inside, cfg.target, &mut rng.derive(&[1]))?);
        targets.extend(std::iter::repeat_n(1, size));
        inputs.push(observe(&shadow, &outside, cfg.target, &mut rng.derive(&[2]))?);
        targets.extend(std::iter::repeat_n(0, size));
    }
    let refs: Vec<&Matrix> = inputs.iter().collect();
    let raw = Matrix::vconcat(&refs)?;
    let scaler = Standardizer::fit(&raw);
    let x = scaler.apply(&raw);

    let mut rng = root.derive(&[u64::MAX]);
    let mut model = DenseNet::init(&[x.cols(), cfg.hidden, 2], Activation::Relu, Activation::Identity, &mut rng)?;
    let train_cfg = TrainingConfig {
        learning_rate: cfg.learning_rate,
        weight_decay: 0.0,
        ..TrainingConfig::default()
    };
    let mut order: Vec<usize> = (0..x.rows()).collect();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(64) {
            let labels: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
            let logits = model.forward(&x.select_rows(chunk))?;
            let (_, g) = cross_entropy_softmax(&logits, &labels)?;
            let (grads, _) = model.backward(&g)?;
            model.sgd_step(&grads, &train_cfg)?;
        }
    }

    let m = members.rows().min(non_members.rows());
    if m == 0 {
        return Err(Error::arg("membership evaluation needs members and non-members"));
    }
    let pick = |d: &VerticalDataset, tag: u64| d.select(&root.derive(&[tag]).sample_indices(d.rows(), m));
    let (inside, outside) = (pick(members, 10), pick(non_members, 11));
    let mut eval_rng = root.derive(&[12]);
    let probe = Matrix::vconcat(&[
        &observe(victim, &inside, cfg.target, &mut eval_rng)?,
        &observe(victim, &outside, cfg.target, &mut eval_rng)?,
    ])?;
    let truth: Vec<usize> = std::iter::repeat_n(1, m).chain(std::iter::repeat_n(0, m)).collect();
    let acc = accuracy(&model.predict(&scaler.apply(&probe))?, &truth);
    Ok(AttackReport {
        kind: AttackKind::MembershipInference,
        victim: tag.to_string(),
        metric: acc,
        std_error: (acc * (1.0 - acc) / (2 * m) as f64).sqrt(),
        trials: 1,
        failed_trials: 0,
        seed: cfg.seed,
    })
}
