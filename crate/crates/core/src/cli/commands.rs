use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde_json::json;

use super::config::{DatasetConfig, ExperimentConfig, LoadedData, PrivacyMode};
use crate::attacks::{inversion_attack, membership_inference, AttackReport};
use crate::data::VerticalDataset;
use crate::protocol::{train, Federation, History, Protection, StageTimers, VflModel};
use crate::{Error, Result};

/// Per-invocation settings resolved from the command line.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions {
    pub seed: u64,
    pub out: PathBuf,
    pub force: bool,
    pub rescale: bool,
    pub dist_adjust: bool,
}

/// The ablation grid: name, rescaling, distribution adjustment.
pub const VARIANTS: [(&str, bool, bool); 4] = [
    ("vanilla", false, false),
    ("vanilla+R", true, false),
    ("vanilla+D", false, true),
    ("vfl-afe", true, true),
];

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force`.
fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    let occupied = fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied {
        if !force {
            return Err(Error::Config(format!(
                "output directory {} already exists; pass --force to overwrite",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn epochs_csv(history: &History) -> String {
    let mut out = String::from("epoch,train_acc,test_acc,loss,mean_delta,purity\n");
    for e in &history.epochs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            e.epoch,
            e.train_acc,
            fmt_opt(e.test_acc),
            e.loss,
            fmt_opt(e.mean_delta),
            fmt_opt(e.purity)
        );
    }
    out
}

fn events_jsonl(history: &History) -> String {
    history
        .rounds
        .iter()
        .map(|r| serde_json::to_string(r).expect("metrics serialize") + "\n")
        .collect()
}

fn dataset_manifest(config: &ExperimentConfig, data: &LoadedData) -> serde_json::Value {
    let kind = match config.dataset {
        DatasetConfig::Synthetic { .. } => "synthetic",
        DatasetConfig::Csv { .. } => "csv",
        DatasetConfig::Idx { .. } => "idx",
    };
    json!({
        "kind": kind,
        "classes": data.train.num_classes,
        "train_rows": data.train.rows(),
        "test_rows": data.test.rows(),
        "party_dims": data.train.party_dims(),
    })
}

fn privacy_summary(protection: &Protection, mode: PrivacyMode, rescale: bool) -> serde_json::Value {
    match protection.params() {
        None => json!({ "mode": mode }),
        Some(p) => json!({
            "mode": mode,
            "epsilon": p.epsilon(),
            "delta": p.delta(),
            "delta_prime": p.delta_prime(),
            "effective_delta": if rescale { p.delta_prime() } else { p.delta() },
            "sigma": p.sigma(),
            "noise_std": p.noise_std(),
            "clip_threshold": p.clip_threshold(),
            "p1": p.p1(),
            "p2": p.p2(),
            "accounting": "per round; no composition across rounds",
        }),
    }
}

/// Trains one configuration and returns the trained federation and history.
pub(crate) fn train_variant(
    config: &ExperimentConfig,
    data: &LoadedData,
    seed: u64,
    mode: PrivacyMode,
    rescale: bool,
    dist_adjust: bool,
) -> Result<(Federation, History)> {
    let fed_cfg = config.federation_config(seed, mode, rescale, dist_adjust, data.train.num_classes)?;
    let mut fed = Federation::new(&data.train, fed_cfg)?;
    let history = train(&mut fed, Some(&data.test))?;
    Ok((fed, history))
}

/// `train`: one run with per-epoch CSV, round events, summary and checkpoints.
pub fn cmd_train(config: &ExperimentConfig, opts: &RunOptions) -> Result<PathBuf> {
    let started = Instant::now();
    let data = config.load_data(opts.seed)?;
    prepare_dir(&opts.out, opts.force)?;
    write(&opts.out.join("config.toml"), config.to_toml())?;
    let mode = config.privacy.mode;
    let (fed, history) = train_variant(config, &data, opts.seed, mode, opts.rescale, opts.dist_adjust)?;
    write(&opts.out.join("epochs.csv"), epochs_csv(&history))?;
    write(&opts.out.join("events.jsonl"), events_jsonl(&history))?;
    let model = fed.model();
    model.save_checkpoints(&opts.out.join("checkpoints"))?;
    let last = history.epochs.last();
    let summary = json!({
        "seed": opts.seed,
        "toggles": { "rescale": opts.rescale, "dist_adjust": opts.dist_adjust },
        "epochs": history.epochs.len(),
        "rounds": history.rounds.len(),
        "final_train_acc": last.map(|e| e.train_acc),
        "final_test_acc": last.and_then(|e| e.test_acc),
        "final_loss": last.map(|e| e.loss),
        "privacy": privacy_summary(&fed.config().protection, mode, opts.rescale),
        "dataset": dataset_manifest(config, &data),
        "runtime_secs": started.elapsed().as_secs_f64(),
    });
    write(
        &opts.out.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    info!("train finished in {:.1}s", started.elapsed().as_secs_f64());
    Ok(opts.out.clone())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// `ablate`: the four variants × `ablate.seeds` seeds, starting at the run
/// seed. Each seed draws its own data; variants share it.
pub fn cmd_ablate(config: &ExperimentConfig, opts: &RunOptions) -> Result<PathBuf> {
    let seeds: Vec<u64> = (0..config.ablate.seeds as u64).map(|s| opts.seed + s).collect();
    if seeds.is_empty() {
        return Err(Error::Config("ablate.seeds must be at least 1".into()));
    }
    let datasets: Vec<LoadedData> = seeds.iter().map(|&s| config.load_data(s)).collect::<Result<_>>()?;
    prepare_dir(&opts.out, opts.force)?;
    write(&opts.out.join("config.toml"), config.to_toml())?;
    let jobs: Vec<(usize, usize)> = (0..VARIANTS.len())
        .flat_map(|v| (0..seeds.len()).map(move |s| (v, s)))
        .collect();
    let results: Vec<(f64, f64)> = jobs
        .par_iter()
        .map(|&(v, s)| {
            let (_, rescale, dist) = VARIANTS[v];
            let (_, history) = train_variant(config, &datasets[s], seeds[s], config.privacy.mode, rescale, dist)?;
            let last = history.epochs.last();
            Ok((
                last.and_then(|e| e.test_acc).unwrap_or(f64::NAN),
                last.map_or(f64::NAN, |e| e.train_acc),
            ))
        })
        .collect::<Result<_>>()?;

    let mut runs = String::from("variant,seed,test_acc,train_acc\n");
    for (&(v, s), (test, train_acc)) in jobs.iter().zip(&results) {
        let _ = writeln!(runs, "{},{},{},{}", VARIANTS[v].0, seeds[s], test, train_acc);
    }
    let mut table = String::from("variant,rescale,dist_adjust,seeds,mean_test_acc,std_test_acc\n");
    let mut summary = Vec::new();
    for (v, (name, rescale, dist)) in VARIANTS.iter().enumerate() {
        let accs: Vec<f64> = jobs
            .iter()
            .zip(&results)
            .filter(|((jv, _), _)| *jv == v)
            .map(|(_, r)| r.0)
            .collect();
        let (mean, std) = mean_std(&accs);
        let _ = writeln!(table, "{name},{rescale},{dist},{},{mean},{std}", accs.len());
        summary.push(json!({ "variant": name, "mean_test_acc": mean, "std_test_acc": std, "test_acc": accs }));
    }
    write(&opts.out.join("ablation.csv"), table)?;
    write(&opts.out.join("ablation_runs.csv"), runs)?;
    write(
        &opts.out.join("summary.json"),
        serde_json::to_string_pretty(&json!({ "seeds": seeds, "variants": summary })).expect("serializes"),
    )?;
    Ok(opts.out.clone())
}

/// Victim configurations attacked by `attack`: name, privacy mode, toggles.
pub const VICTIMS: [(&str, PrivacyMode, bool); 3] = [
    ("unprotected", PrivacyMode::Unprotected, false),
    ("vanilla", PrivacyMode::Dp, false),
    ("vfl-afe", PrivacyMode::Dp, true),
];

fn attack_config(config: &ExperimentConfig) -> ExperimentConfig {
    let mut c = config.clone();
    if let Some(epochs) = config.attack.epochs {
        c.training.epochs = epochs;
    }
    c
}

fn victim_settings(config: &ExperimentConfig, mode: PrivacyMode, features: bool, parties: usize) -> Result<Vec<(Protection, bool, f64)>> {
    let protection = config.protection(mode)?;
    let rescale = features && matches!(protection, Protection::Dp(_));
    Ok(vec![(protection, rescale, config.adaptive.p2); parties])
}

/// `attack`: inversion and membership inference against the three victim
/// configurations; victims are trained on `attack.victim_train_size` rows
/// unless `victims` points at existing runs.
pub fn cmd_attack(config: &ExperimentConfig, opts: &RunOptions, victims: Option<&Path>) -> Result<PathBuf> {
    let config = attack_config(config);
    let data = config.load_data(opts.seed)?;
    let size = config.attack.victim_train_size.min(data.train.rows());
    if size < 2 {
        return Err(Error::Config("attack.victim_train_size must be at least 2".into()));
    }
    let members = data.train.select(&(0..size).collect::<Vec<_>>());
    let (pool, non_members) = config.attacker_data(opts.seed)?;
    let victim_data = LoadedData {
        train: members.clone(),
        test: data.test.clone(),
    };
    let parties = data.train.parties.len();
    if let Some(dir) = victims {
        for (name, _, _) in VICTIMS {
            for file in crate::protocol::CheckpointFiles::for_parties(parties).extractors.iter().chain([&"head.bin".to_string()]) {
                let path = dir.join(name).join("checkpoints").join(file);
                if !path.is_file() {
                    return Err(Error::Config(format!("missing checkpoint {}", path.display())));
                }
            }
        }
    }
    prepare_dir(&opts.out, opts.force)?;
    write(&opts.out.join("config.toml"), config.to_toml())?;

    let reports: Vec<(AttackReport, AttackReport)> = VICTIMS
        .par_iter()
        .map(|&(name, mode, features)| {
            let settings = victim_settings(&config, mode, features, parties)?;
            let batch = config.training.batch_size;
            let ckpt_dir = match victims {
                Some(dir) => dir.join(name).join("checkpoints"),
                None => {
                    let (fed, _) = train_variant(&config, &victim_data, opts.seed, mode, features, features)?;
                    let dir = opts.out.join("victims").join(name).join("checkpoints");
                    fed.model().save_checkpoints(&dir)?;
                    dir
                }
            };
            let victim = VflModel::load_checkpoints(&ckpt_dir, settings, batch)?;
            let inversion = inversion_attack(
                &victim,
                0,
                &pool.parties[0],
                &members.parties[0],
                &config.attack.decoder,
                name,
            )?;
            let mut shadow = |rows: &VerticalDataset, seed: u64| -> Result<VflModel> {
                let shadow_data = LoadedData {
                    train: rows.clone(),
                    test: rows.clone(),
                };
                let cfg = config.federation_config(seed, mode, features, features, rows.num_classes)?;
                let mut fed = Federation::new(&shadow_data.train, cfg)?;
                train(&mut fed, None)?;
                Ok(fed.model())
            };
            let mi = membership_inference(
                &victim,
                &members,
                &non_members,
                &pool,
                &mut shadow,
                &config.attack.shadow,
                name,
            )?;
            Ok((mi, inversion))
        })
        .collect::<Result<_>>()?;

    let mut csv = String::from("victim,mi_accuracy,mi_std_error,inversion_mse,inversion_failed_trials\n");
    for (mi, inv) in &reports {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            mi.victim, mi.metric, mi.std_error, inv.metric, inv.failed_trials
        );
    }
    write(&opts.out.join("attack.csv"), csv)?;
    let all: Vec<&AttackReport> = reports.iter().flat_map(|(a, b)| [a, b]).collect();
    write(
        &opts.out.join("summary.json"),
        serde_json::to_string_pretty(&json!({ "seed": opts.seed, "reports": all })).expect("serializes"),
    )?;
    Ok(opts.out.clone())
}

/// Stage shares in percent: base, noise, rescale, dist-adjust.
pub fn stage_shares(t: &StageTimers) -> [f64; 4] {
    let parts = [t.base, t.noise, t.rescale, t.dist_adjust].map(|d| d.as_secs_f64());
    let total: f64 = parts.iter().sum();
    if total > 0.0 {
        parts.map(|p| 100.0 * p / total)
    } else {
        [0.0; 4]
    }
}

/// `timing`: wall-time share of each stage over `timing.rounds` rounds.
/// Its CSV holds measured times and is not reproducible byte for byte.
pub fn cmd_timing(config: &ExperimentConfig, opts: &RunOptions) -> Result<PathBuf> {
    let data = config.load_data(opts.seed)?;
    let fed_cfg = config.federation_config(
        opts.seed,
        config.privacy.mode,
        opts.rescale,
        opts.dist_adjust,
        data.train.num_classes,
    )?;
    let mut fed = Federation::new(&data.train, fed_cfg)?;
    prepare_dir(&opts.out, opts.force)?;
    write(&opts.out.join("config.toml"), config.to_toml())?;
    for _ in 0..config.timing.warmup {
        fed.step()?;
    }
    let before = fed.timers();
    for _ in 0..config.timing.rounds {
        fed.step()?;
    }
    let timers = fed.timers().since(&before);
    let shares = stage_shares(&timers);
    let seconds = [timers.base, timers.noise, timers.rescale, timers.dist_adjust].map(|d| d.as_secs_f64());
    let mut csv = String::from("stage,seconds,share_percent\n");
    for ((name, s), share) in ["base", "noise", "rescale", "dist_adjust"].iter().zip(seconds).zip(shares) {
        let _ = writeln!(csv, "{name},{s},{share}");
    }
    write(&opts.out.join("timing.csv"), csv)?;
    let summary = json!({
        "seed": opts.seed,
        "rounds": config.timing.rounds,
        "batch_size": config.training.batch_size,
        "embedding_dim": config.model.embedding_dim,
        "toggles": { "rescale": opts.rescale, "dist_adjust": opts.dist_adjust },
        "share_percent": { "base": shares[0], "noise": shares[1], "rescale": shares[2], "dist_adjust": shares[3] },
    });
    write(
        &opts.out.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("serializes"),
    )?;
    Ok(opts.out.clone())
}
