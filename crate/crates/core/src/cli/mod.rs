//! Command-line experiment runner: `train`, `ablate`, `attack`, `timing`.
//!
//! Every command reads a TOML [`ExperimentConfig`] and writes into an output
//! directory: the resolved config, CSV tables and a JSON summary.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{cmd_ablate, cmd_attack, cmd_timing, cmd_train, RunOptions, VARIANTS};
pub use config::{
    AblateSection, AdaptiveSection, AttackSection, DatasetConfig, ExperimentConfig, LoadedData,
    ModelConfig, PartitionConfig, PrivacyMode, PrivacySection, TimingSection, TrainingSection,
};

use crate::{Error, Result};

/// Environment variable naming the default output root.
pub const OUTPUT_ENV: &str = "VFL_AFE_OUT";

#[derive(Debug, Parser)]
#[command(name = "vfl-afe", version, about = "Differentially private vertical federated learning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one federation and record per-epoch metrics.
    Train(CommonArgs),
    /// Run the four protection variants over several seeds.
    Ablate(CommonArgs),
    /// Attack unprotected, vanilla and full-featured victims.
    Attack {
        #[command(flatten)]
        common: CommonArgs,
        /// Directory with `unprotected/`, `vanilla/` and `vfl-afe/` runs whose
        /// `checkpoints/` are attacked; victims are trained when omitted.
        #[arg(long)]
        victims: Option<PathBuf>,
    },
    /// Measure the wall-time share of each pipeline stage.
    Timing(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default: `$VFL_AFE_OUT/<command>-<config>-s<seed>`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace an existing output directory.
    #[arg(long)]
    pub force: bool,
    #[arg(long, value_name = "BOOL", action = clap::ArgAction::Set)]
    pub toggle_rescale: Option<bool>,
    #[arg(long, value_name = "BOOL", action = clap::ArgAction::Set)]
    pub toggle_distadj: Option<bool>,
}

impl CommonArgs {
    fn resolve(&self, command: &str) -> Result<(ExperimentConfig, RunOptions)> {
        let config = ExperimentConfig::load(&self.config)?;
        let seed = self.seed.unwrap_or(config.seed);
        let out = match &self.out {
            Some(dir) => dir.clone(),
            None => {
                let root = config
                    .output_dir
                    .clone()
                    .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
                    .unwrap_or_else(|| PathBuf::from("runs"));
                let stem = self
                    .config
                    .file_stem()
                    .map_or_else(|| "config".into(), |s| s.to_string_lossy().into_owned());
                root.join(format!("{command}-{stem}-s{seed}"))
            }
        };
        let options = RunOptions {
            seed,
            out,
            force: self.force,
            rescale: self.toggle_rescale.unwrap_or(config.adaptive.rescale),
            dist_adjust: self.toggle_distadj.unwrap_or(config.adaptive.dist_adjust),
        };
        Ok((config, options))
    }
}

/// Process exit status for an error: 2 for configuration and usage problems,
/// 1 for failures while running.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Checksum(_) => 2,
        _ => 1,
    }
}

/// Executes a parsed command line and returns the output directory.
pub fn run(cli: Cli) -> Result<PathBuf> {
    match cli.command {
        Command::Train(args) => {
            let (config, options) = args.resolve("train")?;
            cmd_train(&config, &options)
        }
        Command::Ablate(args) => {
            let (config, options) = args.resolve("ablate")?;
            cmd_ablate(&config, &options)
        }
        Command::Attack { common, victims } => {
            let (config, options) = common.resolve("attack")?;
            cmd_attack(&config, &options, victims.as_deref())
        }
        Command::Timing(args) => {
            let (config, options) = args.resolve("timing")?;
            cmd_timing(&config, &options)
        }
    }
}
