//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line.
//!
//! Run with `cargo test -p vfl-afe --test acceptance`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use vfl_afe::adaptive::{
    contrastive_loss, estimate_local_sensitivity, exact_diameter_estimate, fcm, kl_surrogate_loss,
    purity, rescale, AdaptiveConfig, FcmConfig, FuzzyAssignment,
};
use vfl_afe::cli::{cmd_ablate, cmd_attack, cmd_timing, cmd_train, ExperimentConfig, RunOptions};
use vfl_afe::data::{make_synthetic, partition_vertical, PartitionPlan, Split, SyntheticSpec};
use vfl_afe::dp::{
    calibrate_sigma, clip_backward, clip_norm, gaussian_ratio_check, mechanism_ratio_check,
    EmbeddingBatch, PrivacyParams, RatioReport,
};
use vfl_afe::neural::{cross_entropy_softmax, Activation, DenseNet, TrainingConfig};
use vfl_afe::numerics::{gaussian_sample, normal_cdf, pairwise_distances, Matrix, Rng};
use vfl_afe::protocol::{Federation, FederationConfig, Protection};

/// Wall-clock heavy checks run one at a time.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Writes straight to stdout so the line shows without `--nocapture`.
fn report(id: u32, name: &str, pass: bool, elapsed: Duration, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!(
        "criterion {id:>2} {name:<24} {verdict}  ({:.1}s) {detail}\n",
        elapsed.as_secs_f64()
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn finish(id: u32, name: &str, start: Instant, limit: Duration, pass: bool, detail: String) {
    let elapsed = start.elapsed();
    let in_time = elapsed <= limit;
    let detail = if in_time {
        detail
    } else {
        format!("{detail}; over the {}s budget", limit.as_secs())
    };
    report(id, name, pass && in_time, elapsed, &detail);
    assert!(pass, "criterion {id} ({name}): {detail}");
    assert!(in_time, "criterion {id} ({name}) took {elapsed:?}, budget {limit:?}");
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load_config(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&configs_dir().join(name)).unwrap()
}

fn options(seed: u64, out: &Path, rescale: bool, dist_adjust: bool) -> RunOptions {
    RunOptions {
        seed,
        out: out.to_path_buf(),
        force: true,
        rescale,
        dist_adjust,
    }
}

/// Rows of a CSV file as header-keyed maps.
fn read_csv(path: &Path) -> Vec<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    lines
        .map(|l| {
            header
                .iter()
                .zip(l.split(','))
                .map(|(h, v)| (h.to_string(), v.to_string()))
                .collect()
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Tight δ of a Gaussian mechanism with noise std `s` on neighbours `d` apart.
fn exact_delta(eps: f64, s: f64, d: f64) -> f64 {
    let r = s / d;
    normal_cdf(0.5 / r - eps * r) - eps.exp() * normal_cdf(-0.5 / r - eps * r)
}

#[test]
fn c01_mechanism_correctness() {
    let start = Instant::now();
    let mut worst: f64 = f64::NEG_INFINITY;
    let mut calibrated_ok = true;
    let mut flagged = 0;
    let mut oracle_agrees = true;
    for &eps in &[0.2, 0.5, 0.9] {
        for &delta in &[1e-2, 1e-4] {
            let params = PrivacyParams::new(eps, delta, 1.0, 1.0, 0.9987).unwrap();
            assert!(params.sigma() >= calibrate_sigma(eps, delta).unwrap());
            let ok = mechanism_ratio_check(&params, 2001);
            worst = worst.max(ok.max_violation);
            calibrated_ok &= ok.passed();
            let half = params.noise_std() / 2.0;
            let halved = gaussian_ratio_check(eps, delta, half, params.sensitivity(), 2001);
            flagged += usize::from(!halved.passed());
            let truly_broken = exact_delta(eps, half, params.sensitivity()) - delta > RatioReport::TOLERANCE;
            oracle_agrees &= truly_broken == !halved.passed();
        }
    }
    finish(
        1,
        "mechanism correctness",
        start,
        Duration::from_secs(5),
        calibrated_ok && flagged > 0 && oracle_agrees,
        format!("max violation {worst:.3e}; halved sigma flagged at {flagged}/6 points (exact-delta oracle agrees: {oracle_agrees})"),
    );
}

#[test]
fn c02_clip_bound() {
    let start = Instant::now();
    let mut rng = Rng::new(2);
    let mut max_norm: f64 = 0.0;
    let mut max_ratio: f64 = 0.0;
    let mut pass = true;
    for b in 0..1000 {
        let t = [0.1, 1.0, 3.7][b % 3];
        let rows = 2 + rng.below(40);
        let cols = 1 + rng.below(20);
        let scale = rng.uniform_range(0.01, 50.0);
        let data = gaussian_sample(&mut rng, 0.0, scale, (rows, cols)).unwrap();
        let clipped = clip_norm(&EmbeddingBatch::new(0, b as u64, data), t).unwrap();
        let norm = clipped.data.row_norms().into_iter().fold(0.0, f64::max);
        let diameter = pairwise_distances(&clipped.data).unwrap().into_iter().fold(0.0, f64::max);
        pass &= norm <= t && diameter <= 2.0 * t;
        max_norm = max_norm.max(norm / t);
        max_ratio = max_ratio.max(diameter / (2.0 * t));
    }
    finish(
        2,
        "clip bound",
        start,
        Duration::from_secs(5),
        pass,
        format!("max ‖row‖/t = {max_norm}, max diameter/2t = {max_ratio}"),
    );
}

#[test]
fn c03_rescale_tightness() {
    let start = Instant::now();
    let mut rng = Rng::new(3);
    let mut worst_exact: f64 = 0.0;
    for b in 0..100 {
        let t = 1.0;
        let data = gaussian_sample(&mut rng, 0.0, 0.2, (64, 16)).unwrap();
        let clipped = clip_norm(&EmbeddingBatch::new(0, b, data), t).unwrap();
        let est = exact_diameter_estimate(&clipped, t).unwrap();
        let scaled = rescale(&clipped, &est, t);
        let diameter = pairwise_distances(&scaled.data).unwrap().into_iter().fold(0.0, f64::max);
        worst_exact = worst_exact.max((diameter - 2.0 * t).abs());
    }
    let mut worst_fraction: f64 = 0.0;
    let (mut above, mut total) = (0usize, 0usize);
    for b in 0..100 {
        // loose threshold so the estimate is never clamped
        let t = 1e3;
        let data = gaussian_sample(&mut rng, 0.0, 1.0, (64, 16)).unwrap();
        let batch = EmbeddingBatch::new(0, b, data);
        let est = estimate_local_sensitivity(&batch, 0.9987, t).unwrap();
        let d = pairwise_distances(&batch.data).unwrap();
        let over = d.iter().filter(|&&x| x > est.delta_local).count();
        worst_fraction = worst_fraction.max(over as f64 / d.len() as f64);
        above += over;
        total += d.len();
    }
    finish(
        3,
        "rescale tightness",
        start,
        Duration::from_secs(10),
        worst_exact <= 1e-9 && worst_fraction <= 0.01,
        format!(
            "exact: max |diameter − 2t| = {worst_exact:.2e}; quantile: worst batch {:.3}% above, overall {:.3}%",
            100.0 * worst_fraction,
            100.0 * above as f64 / total as f64
        ),
    );
}

/// Worst entry-wise relative error between `analytic` and central differences
/// of `f` around `x`.
fn fd_worst(x: &Matrix, analytic: &Matrix, f: impl Fn(&Matrix) -> f64) -> f64 {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..x.data().len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    worst
}

fn network_fd_worst(net: &DenseNet, x: &Matrix, r: &Matrix) -> f64 {
    let h = 1e-5;
    let objective = |n: &DenseNet, x: &Matrix| -> f64 {
        let out = n.predict(x).unwrap();
        out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };
    let mut working = net.clone();
    working.forward(x).unwrap();
    let (grads, dx) = working.backward(r).unwrap();
    let mut worst: f64 = 0.0;
    for li in 0..net.layers().len() {
        for i in 0..net.layers()[li].weights.data().len() {
            let mut plus = net.clone();
            plus.layers_mut()[li].weights.data_mut()[i] += h;
            let mut minus = net.clone();
            minus.layers_mut()[li].weights.data_mut()[i] -= h;
            let numeric = (objective(&plus, x) - objective(&minus, x)) / (2.0 * h);
            worst = worst.max(rel_err(grads.layers[li].weights.data()[i], numeric));
        }
        for i in 0..net.layers()[li].bias.len() {
            let mut plus = net.clone();
            plus.layers_mut()[li].bias[i] += h;
            let mut minus = net.clone();
            minus.layers_mut()[li].bias[i] -= h;
            let numeric = (objective(&plus, x) - objective(&minus, x)) / (2.0 * h);
            worst = worst.max(rel_err(grads.layers[li].bias[i], numeric));
        }
    }
    worst.max(fd_worst(x, &dx, |xp| objective(net, xp)))
}

#[test]
fn c04_gradient_integrity() {
    let start = Instant::now();
    let mut worst = BTreeMap::new();
    for seed in 0..10u64 {
        let mut rng = Rng::new(400 + seed);
        // tanh keeps every unit differentiable at the probe points
        let net = DenseNet::init(&[5, 7, 4], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let x = gaussian_sample(&mut rng, 0.0, 1.0, (6, 5)).unwrap();
        let r = gaussian_sample(&mut rng, 0.0, 1.0, (6, 4)).unwrap();
        let e = network_fd_worst(&net, &x, &r);
        let slot = worst.entry("layer+input").or_insert(0.0_f64);
        *slot = slot.max(e);

        let h = gaussian_sample(&mut rng, 0.0, 1.0, (8, 3)).unwrap();
        let (_, g) = kl_surrogate_loss(&EmbeddingBatch::new(0, 0, h.clone()), 0.7).unwrap();
        let e = fd_worst(&h, &g, |hp| kl_surrogate_loss(&EmbeddingBatch::new(0, 0, hp.clone()), 0.7).unwrap().0);
        let slot = worst.entry("kl-surrogate").or_insert(0.0_f64);
        *slot = slot.max(e);

        let ids: Vec<usize> = (0..8).map(|i| i % 3).collect();
        let assignment = FuzzyAssignment::hard(ids);
        let (_, g) = contrastive_loss(&EmbeddingBatch::new(0, 0, h.clone()), &assignment, 0.5).unwrap();
        let e = fd_worst(&h, &g, |hp| {
            contrastive_loss(&EmbeddingBatch::new(0, 0, hp.clone()), &assignment, 0.5).unwrap().0
        });
        let slot = worst.entry("contrastive").or_insert(0.0_f64);
        *slot = slot.max(e);

        // rows well outside the clip ball
        let pre = gaussian_sample(&mut rng, 0.0, 2.0, (5, 4)).unwrap();
        let up = gaussian_sample(&mut rng, 0.0, 1.0, (5, 4)).unwrap();
        let g = clip_backward(&pre, &up, 0.5).unwrap();
        let e = fd_worst(&pre, &g, |p| {
            let c = clip_norm(&EmbeddingBatch::new(0, 0, p.clone()), 0.5).unwrap();
            c.data.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
        });
        let slot = worst.entry("clip").or_insert(0.0_f64);
        *slot = slot.max(e);
    }
    let pass = worst.values().all(|&e| e < 1e-4);
    let detail = worst
        .iter()
        .map(|(k, v)| format!("{k} {v:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    finish(4, "gradient integrity", start, Duration::from_secs(30), pass, detail);
}

#[test]
fn c05_fcm_filtering() {
    let start = Instant::now();
    let mut min_purity: f64 = 1.0;
    let mut wins = 0;
    for seed in 0..100u64 {
        let mut rng = Rng::new(500 + seed);
        let (n, dim, sd) = (64, 8, 1.0);
        // blob centres 6σ apart along a random direction
        let dir = gaussian_sample(&mut rng, 0.0, 1.0, (1, dim)).unwrap();
        let len = dir.row_norms()[0];
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let noise = gaussian_sample(&mut rng, 0.0, sd, (n, dim)).unwrap();
        let points = Matrix::from_fn(n, dim, |r, c| {
            let side = if labels[r] == 0 { -3.0 } else { 3.0 };
            noise[(r, c)] + side * sd * dir[(0, c)] / len
        });
        let out = fcm(&points, &FcmConfig::new(2), &mut rng).unwrap();
        let all = purity(&out.assignment, &labels, false).unwrap();
        let kept = purity(&out.assignment, &labels, true).unwrap();
        min_purity = min_purity.min(all);
        wins += usize::from(kept >= all);
    }
    finish(
        5,
        "fcm + filtering",
        start,
        Duration::from_secs(30),
        min_purity >= 0.95 && wins >= 95,
        format!("min purity {min_purity:.3}; filtered ≥ unfiltered in {wins}/100 seeds"),
    );
}

#[test]
fn c06_utility_ordering() {
    let _guard = serial();
    let start = Instant::now();
    let mut config = load_config("blobs.toml");
    config.ablate.seeds = 5;
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ablate");
    cmd_ablate(&config, &options(config.seed, &out, true, true)).unwrap();
    let mut by_variant: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for row in read_csv(&out.join("ablation_runs.csv")) {
        by_variant
            .entry(row["variant"].clone())
            .or_default()
            .push(row["test_acc"].parse().unwrap());
    }
    let med = |name: &str| median(by_variant[name].clone());
    let (v, r, d, afe) = (med("vanilla"), med("vanilla+R"), med("vanilla+D"), med("vfl-afe"));
    let pass = afe >= r && r >= v && afe >= d && d >= v && afe - v >= 0.01;
    finish(
        6,
        "utility ordering",
        start,
        Duration::from_secs(600),
        pass,
        format!("median test acc: vanilla {v:.3}, +R {r:.3}, +D {d:.3}, vfl-afe {afe:.3}"),
    );
}

#[test]
fn c07_noise_off_equivalence() {
    let start = Instant::now();
    let spec = SyntheticSpec {
        classes: 3,
        per_class: 200,
        dim: 6,
        spread: 0.7,
        separation: 1.0,
        seed: 7,
        test_fraction: 0.2,
    };
    let (table, _) = make_synthetic(&spec).unwrap();
    let train = partition_vertical(&table, &PartitionPlan::even(6, 1), Split::Train).unwrap();
    let t = 1.0;
    let params = PrivacyParams::new(0.5, 1e-2, t, 1.0, 0.9987).unwrap().without_noise();
    let training = TrainingConfig {
        learning_rate: 0.1,
        batch_size: 32,
        ..TrainingConfig::default()
    };
    let cfg = FederationConfig::new(training.clone(), Protection::Dp(params), AdaptiveConfig::new(false, false, 3));
    let mut fed = Federation::new(&train, cfg).unwrap();
    let model = fed.model();
    let mut extractor = model.parties[0].extractor.clone();
    let mut head = model.head.clone();
    let mut rng = Rng::new(70);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let idx = rng.sample_indices(train.rows(), 32);
        let x = train.parties[0].select_rows(&idx);
        let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();

        // centralised: extractor → row clip → head on one machine
        let h = extractor.forward(&x).unwrap();
        let clipped = clip_norm(&EmbeddingBatch::new(0, 0, h.clone()), t).unwrap();
        let logits = head.forward(&clipped.data).unwrap();
        let (loss, g) = cross_entropy_softmax(&logits, &labels).unwrap();
        let (head_grads, dh) = head.backward(&g).unwrap();
        let dpre = clip_backward(&h, &dh, t).unwrap();
        let (ext_grads, _) = extractor.backward(&dpre).unwrap();
        head.sgd_step(&head_grads, &training).unwrap();
        extractor.sgd_step(&ext_grads, &training).unwrap();

        let m = fed.run_round(&idx).unwrap();
        worst = worst.max((m.loss - loss).abs());
    }
    finish(
        7,
        "noise-off equivalence",
        start,
        Duration::from_secs(60),
        worst <= 1e-9,
        format!("max |Δloss| over 100 steps = {worst:.2e}"),
    );
}

#[test]
fn c08_attack_resilience() {
    let _guard = serial();
    let start = Instant::now();
    let config = load_config("attack.toml");
    let dir = tempfile::tempdir().unwrap();
    let mut mi: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut mse: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for seed in 1..=5u64 {
        let out = dir.path().join(format!("attack-s{seed}"));
        cmd_attack(&config, &options(seed, &out, true, true), None).unwrap();
        for row in read_csv(&out.join("attack.csv")) {
            mi.entry(row["victim"].clone()).or_default().push(row["mi_accuracy"].parse().unwrap());
            mse.entry(row["victim"].clone()).or_default().push(row["inversion_mse"].parse().unwrap());
        }
    }
    let mi_med = |v: &str| median(mi[v].clone());
    let mse_med = |v: &str| median(mse[v].clone());
    let (mu, mv, ma) = (mi_med("unprotected"), mi_med("vanilla"), mi_med("vfl-afe"));
    let (iu, iv, ia) = (mse_med("unprotected"), mse_med("vanilla"), mse_med("vfl-afe"));
    let pass = mu - mv >= 0.03 && mu - ma >= 0.03 && iv >= 5.0 * iu && ia >= 5.0 * iu;
    finish(
        8,
        "attack resilience",
        start,
        Duration::from_secs(900),
        pass,
        format!(
            "median MI acc: unprotected {mu:.3}, vanilla {mv:.3}, vfl-afe {ma:.3}; \
             median inversion MSE: unprotected {iu:.3}, vanilla {iv:.3} ({:.1}x), vfl-afe {ia:.3} ({:.1}x)",
            iv / iu,
            ia / iu
        ),
    );
}

fn csv_files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut found = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "csv") {
                found.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    found
}

#[test]
fn c09_determinism() {
    let _guard = serial();
    let start = Instant::now();
    let mut config = load_config("blobs.toml");
    config.training.epochs = 2;
    config.ablate.seeds = 2;
    let mut attack = load_config("attack.toml");
    attack.attack.epochs = Some(5);
    attack.attack.shadow.shadows = 2;
    attack.attack.shadow.shadow_size = 60;
    attack.attack.shadow.epochs = 30;
    attack.attack.decoder.epochs = 5;
    let dir = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for rep in 0..2 {
        let root = dir.path().join(format!("rep{rep}"));
        cmd_train(&config, &options(3, &root.join("train"), true, true)).unwrap();
        cmd_ablate(&config, &options(3, &root.join("ablate"), true, true)).unwrap();
        cmd_attack(&attack, &options(3, &root.join("attack"), true, true), None).unwrap();
        runs.push(csv_files(&root));
    }
    let files = runs[0].len();
    let pass = files >= 4 && runs[0] == runs[1];
    finish(
        9,
        "determinism",
        start,
        Duration::from_secs(120),
        pass,
        format!("{files} CSV files compared across train/ablate/attack re-runs"),
    );
}

#[test]
fn c10_timing_accounting() {
    let _guard = serial();
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut pass = true;
    let mut cells = Vec::new();
    for &n in &[64usize, 128] {
        for &l in &[16usize, 32] {
            let mut config = load_config("timing.toml");
            config.training.batch_size = n;
            config.model.embedding_dim = l;
            let out = dir.path().join(format!("timing-n{n}-l{l}"));
            cmd_timing(&config, &options(1, &out, true, true)).unwrap();
            let shares: BTreeMap<String, f64> = read_csv(&out.join("timing.csv"))
                .into_iter()
                .map(|r| (r["stage"].clone(), r["share_percent"].parse().unwrap()))
                .collect();
            let sum: f64 = shares.values().sum();
            let ok = (sum - 100.0).abs() <= 0.1 && shares["rescale"] > shares["dist_adjust"];
            pass &= ok;
            cells.push(format!(
                "n={n} l={l}: R {:.1}% vs D {:.1}% (sum {sum:.2})",
                shares["rescale"], shares["dist_adjust"]
            ));
        }
    }
    finish(10, "timing accounting", start, Duration::from_secs(120), pass, cells.join("; "));
}
