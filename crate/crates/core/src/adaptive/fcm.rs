use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::numerics::{argmax, euclidean, Matrix, Rng};
use crate::{Error, Result};

/// Fuzzy c-means settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FcmConfig {
    pub clusters: usize,
    #[serde(default = "default_fuzzifier")]
    pub fuzzifier: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Confidence threshold `c` below which a row is filtered out.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_fuzzifier() -> f64 {
    2.0
}
fn default_max_iter() -> usize {
    100
}
fn default_tol() -> f64 {
    1e-5
}
fn default_threshold() -> f64 {
    0.8
}

impl FcmConfig {
    pub fn new(clusters: usize) -> Self {
        Self {
            clusters,
            fuzzifier: default_fuzzifier(),
            max_iter: default_max_iter(),
            tol: default_tol(),
            threshold: default_threshold(),
        }
    }
}

/// Hard cluster ids derived from fuzzy memberships, with confidences and the
/// confidence filter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FuzzyAssignment {
    pub cluster_ids: Vec<usize>,
    pub confidences: Vec<f64>,
    pub retained_mask: Vec<bool>,
}

impl FuzzyAssignment {
    /// Builds an assignment from an `n × C` membership matrix.
    pub fn from_memberships(u: &Matrix, threshold: f64) -> Self {
        let mut cluster_ids = Vec::with_capacity(u.rows());
        let mut confidences = Vec::with_capacity(u.rows());
        for row in u.row_iter() {
            let id = argmax(row);
            cluster_ids.push(id);
            confidences.push(row[id]);
        }
        let retained_mask = confidences.iter().map(|&c| c >= threshold).collect();
        Self {
            cluster_ids,
            confidences,
            retained_mask,
        }
    }

    /// Assignment with full confidence for every row, e.g. from known labels.
    pub fn hard(cluster_ids: Vec<usize>) -> Self {
        let n = cluster_ids.len();
        Self {
            cluster_ids,
            confidences: vec![1.0; n],
            retained_mask: vec![true; n],
        }
    }

    pub fn len(&self) -> usize {
        self.cluster_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cluster_ids.is_empty()
    }

    pub fn retained(&self) -> usize {
        self.retained_mask.iter().filter(|&&r| r).count()
    }
}

#[derive(Clone, Debug)]
pub struct FcmResult {
    pub assignment: FuzzyAssignment,
    pub centers: Matrix,
    pub memberships: Matrix,
    /// Objective `Σ u^m d²` after every membership update.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

/// Standard fuzzy c-means by alternating membership / center updates.
///
/// Centers start at `C` distinct sampled rows. A point that coincides with a
/// center gets membership 1 there (lowest id if several coincide).
pub fn fcm(points: &Matrix, config: &FcmConfig, rng: &mut Rng) -> Result<FcmResult> {
    let c = config.clusters;
    if c < 2 {
        return Err(Error::arg(format!("fcm needs at least 2 clusters, got {c}")));
    }
    if !(config.fuzzifier > 1.0) {
        return Err(Error::arg(format!("fuzzifier must be > 1, got {}", config.fuzzifier)));
    }
    if points.rows() < c {
        return Err(Error::arg(format!(
            "fcm needs at least {c} rows, got {}",
            points.rows()
        )));
    }
    let m = config.fuzzifier;
    let mut centers = points.select_rows(&rng.sample_indices(points.rows(), c));
    let mut objective = Vec::new();
    let mut iterations = 0;
    let (mut u, mut j) = memberships(points, &centers, m);
    objective.push(j);
    while iterations < config.max_iter {
        iterations += 1;
        let next = update_centers(points, &centers, &u, m);
        let shift = (0..c)
            .map(|k| euclidean(next.row(k), centers.row(k)))
            .fold(0.0, f64::max);
        centers = next;
        (u, j) = memberships(points, &centers, m);
        objective.push(j);
        if shift < config.tol {
            break;
        }
    }
    Ok(FcmResult {
        assignment: FuzzyAssignment::from_memberships(&u, config.threshold),
        centers,
        memberships: u,
        objective,
        iterations,
    })
}

fn pow_m(x: f64, m: f64) -> f64 {
    if m == 2.0 {
        x * x
    } else {
        x.powf(m)
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Membership matrix for fixed centers, and the objective `Σ u^m d²` it attains.
fn memberships(points: &Matrix, centers: &Matrix, m: f64) -> (Matrix, f64) {
    let c = centers.rows();
    // u_ij ∝ (d_ij²)^{-1/(m-1)}
    let power = 1.0 / (m - 1.0);
    let mut u = Matrix::zeros(points.rows(), c);
    let mut dist = vec![0.0; c];
    let mut objective = 0.0;
    for i in 0..points.rows() {
        for (j, d) in dist.iter_mut().enumerate() {
            *d = squared_distance(points.row(i), centers.row(j));
        }
        let row = u.row_mut(i);
        if let Some(hit) = dist.iter().position(|&d| d == 0.0) {
            row[hit] = 1.0;
            continue;
        }
        // scaled by the nearest distance for stability
        let nearest = dist.iter().copied().fold(f64::INFINITY, f64::min);
        let mut total = 0.0;
        for (r, d) in row.iter_mut().zip(&dist) {
            *r = if power == 1.0 { nearest / d } else { (nearest / d).powf(power) };
            total += *r;
        }
        for (r, d) in row.iter_mut().zip(&dist) {
            *r /= total;
            objective += pow_m(*r, m) * d;
        }
    }
    (u, objective)
}

fn update_centers(points: &Matrix, old: &Matrix, u: &Matrix, m: f64) -> Matrix {
    let mut centers = Matrix::zeros(old.rows(), old.cols());
    for j in 0..old.rows() {
        let mut weight = 0.0;
        let acc = centers.row_mut(j);
        for i in 0..points.rows() {
            let w = pow_m(u[(i, j)], m);
            if w == 0.0 {
                continue;
            }
            weight += w;
            for (a, x) in acc.iter_mut().zip(points.row(i)) {
                *a += w * x;
            }
        }
        if weight > 0.0 {
            acc.iter_mut().for_each(|a| *a /= weight);
        } else {
            acc.copy_from_slice(old.row(j));
        }
    }
    centers
}

/// Fraction of counted rows whose cluster's majority label matches theirs.
///
/// With `use_mask`, only rows retained by the confidence filter count.
pub fn purity(assignment: &FuzzyAssignment, labels: &[usize], use_mask: bool) -> Result<f64> {
    if assignment.len() != labels.len() {
        return Err(Error::shape(format!(
            "purity: {} assignments vs {} labels",
            assignment.len(),
            labels.len()
        )));
    }
    let mut counts: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    let mut total = 0usize;
    for (i, (&id, &label)) in assignment.cluster_ids.iter().zip(labels).enumerate() {
        if use_mask && !assignment.retained_mask[i] {
            continue;
        }
        *counts.entry(id).or_default().entry(label).or_default() += 1;
        total += 1;
    }
    if total == 0 {
        return Err(Error::InsufficientRetained(
            "no rows left to compute purity".into(),
        ));
    }
    let majority: usize = counts
        .values()
        .map(|by_label| by_label.values().copied().max().unwrap_or(0))
        .sum();
    Ok(majority as f64 / total as f64)
}
