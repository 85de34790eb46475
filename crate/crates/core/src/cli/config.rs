use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adaptive::{AdaptiveConfig, FcmConfig, KlMode};
use crate::attacks::{DecoderConfig, ShadowConfig};
use crate::data::{
    load_csv, load_idx, make_synthetic_draw, partition_vertical, ColumnSpec, CsvSchema, ImageCut,
    PartitionPlan, Split, SyntheticSpec, Table, VerticalDataset,
};
use crate::dp::PrivacySettings;
use crate::neural::{Activation, TrainingConfig};
use crate::numerics::Rng;
use crate::protocol::{FederationConfig, Protection};
use crate::{Error, Result};

/// Top-level experiment description read from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Output root for runs; overridden by `--out`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub privacy: PrivacySection,
    #[serde(default)]
    pub adaptive: AdaptiveSection,
    #[serde(default)]
    pub ablate: AblateSection,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub timing: TimingSection,
}

fn default_seed() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        classes: usize,
        per_class: usize,
        dim: usize,
        spread: f64,
        #[serde(default = "one")]
        separation: f64,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
        /// Fixed data seed; defaults to the run seed.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Csv {
        path: PathBuf,
        columns: Vec<ColumnSpec>,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        /// Keep only the first `limit` images.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limit: Option<usize>,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
}

fn one() -> f64 {
    1.0
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    /// Even contiguous split into this many parties (ignored when
    /// `columns` or `image_cut` is set).
    #[serde(default = "two")]
    pub parties: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub columns: Option<Vec<[usize; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_cut: Option<ImageCut>,
}

fn two() -> usize {
    2
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            parties: 2,
            columns: None,
            image_cut: None,
        }
    }
}

impl PartitionConfig {
    fn plan(&self, width: usize) -> Result<PartitionPlan> {
        match (&self.columns, self.image_cut) {
            (Some(_), Some(_)) => Err(Error::Config(
                "partition: set either `columns` or `image_cut`, not both".into(),
            )),
            (Some(cols), None) => Ok(PartitionPlan::Columns(cols.iter().map(|[a, b]| *a..*b).collect())),
            (None, Some(cut)) => Ok(PartitionPlan::Image(cut)),
            (None, None) => {
                if self.parties == 0 || self.parties > width {
                    return Err(Error::Config(format!(
                        "partition: cannot split {width} features among {} parties",
                        self.parties
                    )));
                }
                Ok(PartitionPlan::even(width, self.parties))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub extractor_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub activation: Activation,
    #[serde(default = "identity")]
    pub embedding_activation: Activation,
}

fn identity() -> Activation {
    Activation::Identity
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 16,
            extractor_hidden: vec![32],
            head_hidden: vec![],
            activation: Activation::Relu,
            embedding_activation: Activation::Identity,
        }
    }
}

/// [`TrainingConfig`] without the seed, which is set per run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Evaluate through the noisy release path.
    pub eval_noise: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainingConfig::default();
        Self {
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            epochs: t.epochs,
            alpha: t.alpha,
            beta: t.beta,
            eval_noise: true,
        }
    }
}

impl TrainingSection {
    pub fn with_seed(&self, seed: u64) -> TrainingConfig {
        TrainingConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            alpha: self.alpha,
            beta: self.beta,
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrivacyMode {
    Dp,
    /// Clipping without noise; no privacy guarantee (testing only).
    DpNoiseOff,
    Unprotected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacySection {
    pub mode: PrivacyMode,
    pub epsilon: f64,
    pub delta: f64,
    pub clip_threshold: f64,
    pub p1: f64,
    pub allow_large_epsilon: bool,
}

impl Default for PrivacySection {
    fn default() -> Self {
        let s = PrivacySettings::default();
        Self {
            mode: PrivacyMode::Dp,
            epsilon: s.epsilon,
            delta: s.delta,
            clip_threshold: s.clip_threshold,
            p1: s.p1,
            allow_large_epsilon: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptiveSection {
    pub rescale: bool,
    pub dist_adjust: bool,
    pub p2: f64,
    pub kl_mode: KlMode,
    pub filter_threshold: f64,
    pub fuzzifier: f64,
    pub fcm_max_iter: usize,
    pub fcm_tol: f64,
    /// Cluster count for gradient clustering; defaults to the class count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clusters: Option<usize>,
}

impl Default for AdaptiveSection {
    fn default() -> Self {
        let fcm = FcmConfig::new(2);
        Self {
            rescale: true,
            dist_adjust: true,
            p2: 0.9987,
            kl_mode: KlMode::Moments,
            filter_threshold: fcm.threshold,
            fuzzifier: fcm.fuzzifier,
            fcm_max_iter: fcm.max_iter,
            fcm_tol: fcm.tol,
            clusters: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    pub seeds: usize,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self { seeds: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    /// Training rows given to each victim (small to expose overfitting).
    pub victim_train_size: usize,
    /// Epoch override for victims and shadows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub decoder: DecoderConfig,
    #[serde(default)]
    pub shadow: ShadowConfig,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            victim_train_size: 200,
            epochs: None,
            decoder: DecoderConfig::default(),
            shadow: ShadowConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingSection {
    /// Communication rounds measured.
    pub rounds: usize,
    /// Untimed rounds run first.
    pub warmup: usize,
}

impl Default for TimingSection {
    fn default() -> Self {
        Self {
            rounds: 50,
            warmup: 5,
        }
    }
}

/// Train and test splits after partitioning.
#[derive(Clone, Debug)]
pub struct LoadedData {
    pub train: VerticalDataset,
    pub test: VerticalDataset,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn validate(&self) -> Result<()> {
        let config_err = |e: Error| Error::Config(e.to_string());
        self.training.with_seed(self.seed).validate().map_err(config_err)?;
        if self.privacy.mode != PrivacyMode::Unprotected {
            self.privacy_settings().resolve().map_err(config_err)?;
        }
        if !(self.adaptive.p2 > 0.0 && self.adaptive.p2 < 1.0) {
            return Err(Error::Config(format!("adaptive.p2 must lie in (0, 1), got {}", self.adaptive.p2)));
        }
        if self.model.embedding_dim == 0 {
            return Err(Error::Config("model.embedding_dim must be > 0".into()));
        }
        Ok(())
    }

    pub fn privacy_settings(&self) -> PrivacySettings {
        PrivacySettings {
            epsilon: self.privacy.epsilon,
            delta: self.privacy.delta,
            clip_threshold: self.privacy.clip_threshold,
            p1: self.privacy.p1,
            p2: self.adaptive.p2,
            allow_large_epsilon: self.privacy.allow_large_epsilon,
        }
    }

    /// Protection for the configured mode.
    pub fn protection(&self, mode: PrivacyMode) -> Result<Protection> {
        Ok(match mode {
            PrivacyMode::Unprotected => Protection::Unprotected,
            PrivacyMode::Dp => Protection::Dp(self.privacy_settings().resolve()?),
            PrivacyMode::DpNoiseOff => Protection::Dp(self.privacy_settings().resolve()?.without_noise()),
        })
    }

    pub fn federation_config(
        &self,
        seed: u64,
        mode: PrivacyMode,
        rescale: bool,
        dist_adjust: bool,
        classes: usize,
    ) -> Result<FederationConfig> {
        let a = &self.adaptive;
        let adaptive = AdaptiveConfig {
            rescale,
            dist_adjust,
            p2: a.p2,
            kl_mode: a.kl_mode,
            fcm: FcmConfig {
                clusters: a.clusters.unwrap_or(classes),
                fuzzifier: a.fuzzifier,
                max_iter: a.fcm_max_iter,
                tol: a.fcm_tol,
                threshold: a.filter_threshold,
            },
        };
        Ok(FederationConfig {
            embedding_dim: self.model.embedding_dim,
            extractor_hidden: self.model.extractor_hidden.clone(),
            head_hidden: self.model.head_hidden.clone(),
            activation: self.model.activation,
            embedding_activation: self.model.embedding_activation,
            training: self.training.with_seed(seed),
            protection: self.protection(mode)?,
            adaptive,
            eval_noise: self.training.eval_noise,
        })
    }

    fn tables(&self, seed: u64, draw: u64) -> Result<(Table, Table)> {
        match &self.dataset {
            DatasetConfig::Synthetic {
                classes,
                per_class,
                dim,
                spread,
                separation,
                test_fraction,
                seed: data_seed,
            } => make_synthetic_draw(
                &SyntheticSpec {
                    classes: *classes,
                    per_class: *per_class,
                    dim: *dim,
                    spread: *spread,
                    separation: *separation,
                    seed: data_seed.unwrap_or(seed),
                    test_fraction: *test_fraction,
                },
                draw,
            ),
            DatasetConfig::Csv {
                path,
                columns,
                test_fraction,
            } => {
                let table = load_csv(path, &CsvSchema { columns: columns.clone() })?;
                table.encode_split(*test_fraction, &mut Rng::new(seed).derive(&[0x5eed]))
            }
            DatasetConfig::Idx {
                images,
                labels,
                limit,
                test_fraction,
            } => {
                let mut table = load_idx(images, labels)?;
                if let Some(limit) = limit {
                    let keep: Vec<usize> = (0..table.rows().min(*limit)).collect();
                    table = table.select(&keep);
                }
                table.split(*test_fraction, &mut Rng::new(seed).derive(&[0x5eed]))
            }
        }
    }

    fn partition(&self, train: &Table, test: &Table) -> Result<LoadedData> {
        let plan = self.partition.plan(train.features.cols())?;
        Ok(LoadedData {
            train: partition_vertical(train, &plan, Split::Train)?,
            test: partition_vertical(test, &plan, Split::Test)?,
        })
    }

    /// The experiment's dataset for `seed`, partitioned.
    pub fn load_data(&self, seed: u64) -> Result<LoadedData> {
        let (train, test) = self.tables(seed, 0)?;
        self.partition(&train, &test)
    }

    /// Data from the same distribution held by an attacker: a fresh draw for
    /// synthetic data, otherwise the second half of the test split (the
    /// first half stays with the victim as non-members).
    pub fn attacker_data(&self, seed: u64) -> Result<(VerticalDataset, VerticalDataset)> {
        match self.dataset {
            DatasetConfig::Synthetic { .. } => {
                let (pool, _) = self.tables(seed, 1)?;
                let data = self.partition(&pool, &pool)?;
                let victim_test = self.load_data(seed)?.test;
                Ok((data.train, victim_test))
            }
            _ => {
                let test = self.load_data(seed)?.test;
                let half = test.rows() / 2;
                let victim: Vec<usize> = (0..half).collect();
                let attacker: Vec<usize> = (half..test.rows()).collect();
                Ok((test.select(&attacker), test.select(&victim)))
            }
        }
    }
}
