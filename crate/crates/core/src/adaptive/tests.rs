use proptest::prelude::*;

use super::kl::{histogram_kl, moment_loss};
use super::*;
use crate::dp::{clip_norm, EmbeddingBatch};
use crate::neural::{Activation, DenseNet, TrainingConfig};
use crate::numerics::{euclidean, gaussian_sample, pairwise_distances, Rng};

fn batch(m: Matrix) -> EmbeddingBatch {
    EmbeddingBatch::new(0, 0, m)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Max relative error between `analytic` and central differences of `f`.
fn fd_error(x: &Matrix, analytic: &Matrix, f: impl Fn(&Matrix) -> f64) -> f64 {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..x.data().len() {
        let mut p = x.clone();
        p.data_mut()[i] += h;
        let mut m = x.clone();
        m.data_mut()[i] -= h;
        let numeric = (f(&p) - f(&m)) / (2.0 * h);
        worst = worst.max(rel_err(numeric, analytic.data()[i]));
    }
    worst
}

// ---- sensitivity and rescale ----

#[test]
fn quantile_of_one_two_three() {
    let est = estimate_from_distances(&[1.0, 2.0, 3.0], 0.9987, 10.0).unwrap();
    assert_eq!(est.mu_h, 2.0);
    assert!((est.sigma_h - 1.0).abs() < 1e-15);
    // μ + 3σ; z(0.9987) = 3.0115
    assert!((est.delta_local - 5.0).abs() < 0.02, "{}", est.delta_local);
}

#[test]
fn quantile_is_clamped_to_twice_threshold() {
    let est = estimate_from_distances(&[1.0, 2.0, 3.0], 0.9987, 1.0).unwrap();
    assert_eq!(est.delta_local, 2.0);
}

#[test]
fn identical_rows_clamp_to_floor() {
    let b = batch(Matrix::filled(5, 3, 0.2));
    let est = estimate_local_sensitivity(&b, 0.9987, 1.0).unwrap();
    assert_eq!(est.mu_h, 0.0);
    assert_eq!(est.sigma_h, 0.0);
    assert_eq!(est.delta_local, 1e-6);
}

#[test]
fn estimate_needs_two_rows() {
    let b = batch(Matrix::zeros(1, 3));
    assert!(estimate_local_sensitivity(&b, 0.9987, 1.0).is_err());
    let b = batch(Matrix::zeros(3, 3));
    assert!(estimate_local_sensitivity(&b, 1.0, 1.0).is_err());
}

#[test]
fn quantile_covers_empirical_distances() {
    for seed in 0..20 {
        let mut rng = Rng::new(seed);
        let raw = gaussian_sample(&mut rng, 0.0, 1.0, (64, 16)).unwrap();
        let clipped = clip_norm(&batch(raw), 1.0).unwrap();
        let est = estimate_local_sensitivity(&clipped, 0.9987, 1.0).unwrap();
        let d = pairwise_distances(&clipped.data).unwrap();
        let above = d.iter().filter(|&&x| x > est.delta_local).count();
        assert!(above as f64 <= 0.01 * d.len() as f64, "seed {seed}: {above}/{}", d.len());
    }
}

fn estimate_with(delta_local: f64) -> SensitivityEstimate {
    SensitivityEstimate {
        mu_h: 0.0,
        sigma_h: 0.0,
        delta_local,
        p2: 0.9987,
    }
}

#[test]
fn rescale_by_half_budget_doubles() {
    let b = batch(Matrix::from_rows(&[[0.3, 0.4]]).unwrap());
    let out = rescale(&b, &estimate_with(1.0), 1.0);
    assert!((out.data[(0, 0)] - 0.6).abs() < 1e-15);
    assert!((out.data[(0, 1)] - 0.8).abs() < 1e-15);
    assert_eq!(rescale(&b, &estimate_with(2.0), 1.0), b);
}

fn diameter(m: &Matrix) -> f64 {
    pairwise_distances(m).unwrap().into_iter().fold(0.0, f64::max)
}

#[test]
fn exact_diameter_rescale_fills_budget() {
    let b = batch(Matrix::from_rows(&[[0.0, 0.0], [0.3, 0.4], [0.1, -0.05]]).unwrap());
    assert!((diameter(&b.data) - 0.5).abs() < 1e-15);
    let est = exact_diameter_estimate(&b, 1.0).unwrap();
    let out = rescale(&b, &est, 1.0);
    assert!((diameter(&out.data) - 2.0).abs() < 1e-9);
}

proptest! {
    #[test]
    fn rescale_scales_all_distances_uniformly(seed in 0u64..500, delta in 0.05f64..2.0) {
        let mut rng = Rng::new(seed);
        let raw = gaussian_sample(&mut rng, 0.0, 1.0, (8, 4)).unwrap();
        let b = clip_norm(&batch(raw), 1.0).unwrap();
        let out = rescale(&b, &estimate_with(delta), 1.0);
        let before = pairwise_distances(&b.data).unwrap();
        let after = pairwise_distances(&out.data).unwrap();
        let factor = 2.0 / delta;
        for (x, y) in before.iter().zip(&after) {
            prop_assert!((y - factor * x).abs() <= 1e-12 * factor.max(1.0));
        }
        let arg = |v: &[f64]| crate::numerics::argmax(v);
        prop_assert_eq!(arg(&before), arg(&after));
    }
}

// ---- distance-distribution loss ----

#[test]
fn moment_loss_vanishes_on_symmetric_mesokurtic_distances() {
    // distances {1,3,2,2,2,2}: skew 0, kurtosis 3
    let b = batch(
        Matrix::from_rows(&[
            [0.5, 0.0, 0.0],
            [-0.5, 0.0, 0.0],
            [0.0, 1.5, 1.5f64.sqrt()],
            [0.0, -1.5, 1.5f64.sqrt()],
        ])
        .unwrap(),
    );
    let mut d = pairwise_distances(&b.data).unwrap();
    d.sort_by(f64::total_cmp);
    for (x, want) in d.iter().zip([1.0, 2.0, 2.0, 2.0, 2.0, 3.0]) {
        assert!((x - want).abs() < 1e-12);
    }
    let (loss, _) = kl_surrogate_loss(&b, 1.0).unwrap();
    assert!(loss.abs() < 1e-20, "{loss}");
}

#[test]
fn moment_loss_matches_direct_statistics() {
    let d = [0.2, 0.5, 0.9, 1.7, 0.4, 0.45, 3.0];
    let n = d.len() as f64;
    let mu = d.iter().sum::<f64>() / n;
    let m = |r: i32| d.iter().map(|x| (x - mu).powi(r)).sum::<f64>() / n;
    let skew = m(3) / m(2).powf(1.5);
    let kurt = m(4) / m(2).powi(2) - 3.0;
    let (loss, _) = moment_loss(&d);
    assert!((loss - (skew * skew + kurt * kurt)).abs() < 1e-12);
}

#[test]
fn kl_gradient_matches_finite_differences() {
    for seed in 0..10 {
        let mut rng = Rng::new(100 + seed);
        let x = gaussian_sample(&mut rng, 0.0, 1.0, (6, 3)).unwrap();
        let (_, grad) = kl_surrogate_loss(&batch(x.clone()), 0.7).unwrap();
        let err = fd_error(&x, &grad, |m| kl_surrogate_loss(&batch(m.clone()), 0.7).unwrap().0);
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn histogram_kl_gradient_matches_finite_differences() {
    let mut rng = Rng::new(9);
    let x = gaussian_sample(&mut rng, 0.0, 1.0, (8, 3)).unwrap();
    let d = pairwise_distances(&x).unwrap();
    let n = d.len() as f64;
    let mu = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt();
    let (loss, dgrad) = histogram_kl(&d, mu, sd);
    assert!(loss >= 0.0);
    let grad = distance_grad_to_batch(&x, &d, &dgrad);
    let err = fd_error(&x, &grad, |m| histogram_kl(&pairwise_distances(m).unwrap(), mu, sd).0);
    assert!(err < 1e-4, "{err}");
    let (_, g) = kl_loss(&batch(x), 1.0, KlMode::Histogram).unwrap();
    assert!((g.sub(&grad).unwrap().frobenius_sq()).sqrt() < 1e-12);
}

#[test]
fn kl_weight_off_and_small_batches() {
    let mut rng = Rng::new(4);
    let x = gaussian_sample(&mut rng, 0.0, 1.0, (6, 3)).unwrap();
    let (loss, grad) = kl_surrogate_loss(&batch(x), 0.0).unwrap();
    assert_eq!(loss, 0.0);
    assert_eq!(grad, Matrix::zeros(6, 3));
    assert!(kl_surrogate_loss(&batch(Matrix::zeros(3, 2)), 1.0).is_err());
}

// ---- fuzzy c-means and purity ----

fn column(values: &[f64]) -> Matrix {
    Matrix::new(values.len(), 1, values.to_vec()).unwrap()
}

#[test]
fn fcm_separates_two_groups_on_a_line() {
    let pts = column(&[0.0, 0.1, 10.0, 10.1]);
    let out = fcm(&pts, &FcmConfig::new(2), &mut Rng::new(1)).unwrap();
    let ids = &out.assignment.cluster_ids;
    assert_eq!(ids[0], ids[1]);
    assert_eq!(ids[2], ids[3]);
    assert_ne!(ids[0], ids[2]);
    assert!(out.assignment.confidences.iter().all(|&c| c > 0.99));

    // brute force: the hard partition minimising within-cluster scatter
    let values = [0.0, 0.1, 10.0, 10.1];
    let scatter = |mask: u32| -> f64 {
        let mut total = 0.0;
        for side in [0, 1] {
            let group: Vec<f64> = (0..4)
                .filter(|i| (mask >> i) & 1 == side)
                .map(|i| values[i as usize])
                .collect();
            if group.is_empty() {
                return f64::INFINITY;
            }
            let mean = group.iter().sum::<f64>() / group.len() as f64;
            total += group.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
        }
        total
    };
    let best = (1u32..15).min_by(|a, b| scatter(*a).total_cmp(&scatter(*b))).unwrap();
    for i in 0..4 {
        for k in 0..4 {
            let same_best = (best >> i) & 1 == (best >> k) & 1;
            assert_eq!(ids[i] == ids[k], same_best);
        }
    }
}

#[test]
fn fcm_identical_points_are_fully_confident() {
    let pts = Matrix::filled(6, 2, 1.5);
    let out = fcm(&pts, &FcmConfig::new(3), &mut Rng::new(2)).unwrap();
    assert!(out.assignment.confidences.iter().all(|&c| c == 1.0));
    assert!(out.assignment.cluster_ids.iter().all(|&i| i == 0));
}

#[test]
fn fcm_point_on_center_gets_full_membership() {
    let pts = column(&[0.0, 1.0, 4.0, 9.0, 11.0]);
    let cfg = FcmConfig {
        max_iter: 0,
        ..FcmConfig::new(2)
    };
    let out = fcm(&pts, &cfg, &mut Rng::new(3)).unwrap();
    for j in 0..2 {
        let center = out.centers[(j, 0)];
        let i = (0..5).find(|&i| pts[(i, 0)] == center).unwrap();
        assert_eq!(out.memberships[(i, j)], 1.0);
        assert_eq!(out.assignment.confidences[i], 1.0);
    }
}

#[test]
fn fcm_argument_errors() {
    let pts = column(&[0.0, 1.0]);
    assert!(fcm(&pts, &FcmConfig::new(3), &mut Rng::new(0)).is_err());
    assert!(fcm(&pts, &FcmConfig::new(1), &mut Rng::new(0)).is_err());
    let cfg = FcmConfig {
        fuzzifier: 1.0,
        ..FcmConfig::new(2)
    };
    assert!(fcm(&pts, &cfg, &mut Rng::new(0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn fcm_memberships_and_objective(seed in 0u64..10_000, c in 2usize..5) {
        let mut rng = Rng::new(seed);
        let pts = gaussian_sample(&mut rng, 0.0, 1.0, (30, 3)).unwrap();
        let out = fcm(&pts, &FcmConfig::new(c), &mut rng).unwrap();
        for row in out.memberships.row_iter() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        for w in out.objective.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12, "{:?}", out.objective);
        }
        for (&conf, &kept) in out.assignment.confidences.iter().zip(&out.assignment.retained_mask) {
            prop_assert!(conf >= 1.0 / c as f64 - 1e-12);
            prop_assert!(!kept || conf >= 0.8);
        }
    }
}

#[test]
fn purity_examples() {
    let a = FuzzyAssignment::hard(vec![0, 0, 1, 1]);
    assert_eq!(purity(&a, &[3, 3, 5, 5], false).unwrap(), 1.0);
    assert_eq!(purity(&a, &[0, 1, 0, 1], false).unwrap(), 0.5);
    assert!(purity(&a, &[0, 1, 0], false).is_err());
    let mut masked = a.clone();
    masked.retained_mask = vec![false; 4];
    assert!(matches!(
        purity(&masked, &[0, 0, 1, 1], true),
        Err(crate::Error::InsufficientRetained(_))
    ));
}

#[test]
fn purity_matches_counting_table() {
    let mut rng = Rng::new(77);
    let ids: Vec<usize> = (0..100).map(|_| rng.below(10)).collect();
    let labels: Vec<usize> = (0..100).map(|_| rng.below(10)).collect();
    let mut table = [[0usize; 10]; 10];
    for (&i, &l) in ids.iter().zip(&labels) {
        table[i][l] += 1;
    }
    let expected = table.iter().map(|r| *r.iter().max().unwrap()).sum::<usize>() as f64 / 100.0;
    let got = purity(&FuzzyAssignment::hard(ids), &labels, false).unwrap();
    assert_eq!(got, expected);
}

/// Two Gaussian blobs of gradient-like vectors with overlapping tails.
fn gradient_blobs(rng: &mut Rng, n: usize, dim: usize, separation: f64) -> (Matrix, Vec<usize>) {
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let noise = gaussian_sample(rng, 0.0, 1.0, (n, dim)).unwrap();
    let points = Matrix::from_fn(n, dim, |r, c| {
        let shift = if c == 0 { separation * (labels[r] as f64 - 0.5) } else { 0.0 };
        noise[(r, c)] + shift
    });
    (points, labels)
}

#[test]
fn filtering_improves_purity() {
    let mut wins = 0;
    for seed in 0..100 {
        let mut rng = Rng::new(seed);
        let (pts, labels) = gradient_blobs(&mut rng, 64, 4, 2.5);
        let out = fcm(&pts, &FcmConfig::new(2), &mut rng).unwrap();
        let all = purity(&out.assignment, &labels, false).unwrap();
        let kept = purity(&out.assignment, &labels, true).unwrap();
        wins += usize::from(kept >= all);
    }
    assert!(wins >= 95, "{wins}");
}

// ---- contrastive loss ----

#[test]
fn contrastive_same_cluster_is_zero() {
    let b = batch(Matrix::from_rows(&[[0.0, 0.0], [3.0, 4.0]]).unwrap());
    let (loss, grad) = contrastive_loss(&b, &FuzzyAssignment::hard(vec![1, 1]), 1.0).unwrap();
    assert_eq!(loss, 0.0);
    assert_eq!(grad, Matrix::zeros(2, 2));
}

#[test]
fn contrastive_hand_value() {
    let b = batch(Matrix::from_rows(&[[0.0, 0.0], [3.0, 4.0]]).unwrap());
    let (loss, _) = contrastive_loss(&b, &FuzzyAssignment::hard(vec![0, 1]), 1.0).unwrap();
    assert!((loss + 2.5).abs() < 1e-15);
}

#[test]
fn contrastive_gradient_matches_finite_differences() {
    for seed in 0..10 {
        let mut rng = Rng::new(200 + seed);
        let x = gaussian_sample(&mut rng, 0.0, 1.0, (7, 3)).unwrap();
        let mut a = FuzzyAssignment::hard((0..7).map(|_| rng.below(3)).collect());
        a.retained_mask[rng.below(7)] = false;
        let (_, grad) = contrastive_loss(&batch(x.clone()), &a, 0.8).unwrap();
        let err = fd_error(&x, &grad, |m| contrastive_loss(&batch(m.clone()), &a, 0.8).unwrap().0);
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn contrastive_ignores_filtered_rows_and_tiny_batches() {
    let b = batch(Matrix::from_rows(&[[0.0, 0.0], [3.0, 4.0], [1.0, 1.0]]).unwrap());
    let mut a = FuzzyAssignment::hard(vec![0, 1, 2]);
    a.retained_mask = vec![true, false, false];
    let (loss, grad) = contrastive_loss(&b, &a, 1.0).unwrap();
    assert_eq!(loss, 0.0);
    assert_eq!(grad, Matrix::zeros(3, 2));
    a.retained_mask = vec![true, true, false];
    let (loss, grad) = contrastive_loss(&b, &a, 1.0).unwrap();
    assert!((loss + 10.0 / 9.0).abs() < 1e-15);
    assert!(grad.row(2).iter().all(|&g| g == 0.0));
}

fn mean_inter_class_distance(h: &Matrix, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for j in 0..h.rows() {
        for k in j + 1..h.rows() {
            if labels[j] != labels[k] {
                total += euclidean(h.row(j), h.row(k));
                count += 1;
            }
        }
    }
    total / count as f64
}

fn train_toy_extractor(beta: f64) -> f64 {
    let mut rng = Rng::new(31);
    let (x, labels) = gradient_blobs(&mut rng, 64, 6, 1.0);
    let mut net = DenseNet::init(&[6, 12, 4], Activation::Tanh, Activation::Tanh, &mut rng).unwrap();
    let cfg = TrainingConfig {
        learning_rate: 0.05,
        weight_decay: 0.0,
        ..TrainingConfig::default()
    };
    let assignment = FuzzyAssignment::hard(labels.clone());
    for _ in 0..100 {
        let h = net.forward(&x).unwrap();
        let (_, g) = contrastive_loss(&batch(h), &assignment, beta).unwrap();
        let (grads, _) = net.backward(&g).unwrap();
        net.sgd_step(&grads, &cfg).unwrap();
    }
    mean_inter_class_distance(&net.predict(&x).unwrap(), &labels)
}

#[test]
fn contrastive_training_spreads_classes() {
    let control = train_toy_extractor(0.0);
    let trained = train_toy_extractor(1.0);
    assert!(trained > control, "{trained} vs {control}");
}
