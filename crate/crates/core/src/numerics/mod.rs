//! Dense linear algebra, seeded random streams and special functions shared
//! by every other module. Everything is `f64`.

mod matrix;
mod rng;
pub mod special;

pub use matrix::{argmax, dot, euclidean, norm, Matrix};
pub use rng::Rng;
pub use special::{erf, erf_inv, erfc, normal_cdf, normal_quantile};

use crate::{Error, Result};

/// Matrix of i.i.d. `N(mean, std²)` entries. `std == 0` yields a constant matrix.
pub fn gaussian_sample(
    rng: &mut Rng,
    mean: f64,
    std: f64,
    (rows, cols): (usize, usize),
) -> Result<Matrix> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::arg(format!("standard deviation must be >= 0, got {std}")));
    }
    if std == 0.0 {
        return Ok(Matrix::filled(rows, cols, mean));
    }
    Ok(Matrix::from_fn(rows, cols, |_, _| {
        mean + std * rng.standard_normal()
    }))
}

/// All `n(n-1)/2` unordered row distances, ordered `(0,1), (0,2), …, (n-2,n-1)`.
pub fn pairwise_distances(batch: &Matrix) -> Result<Vec<f64>> {
    if batch.rows() < 2 {
        return Err(Error::arg(format!(
            "pairwise distances need at least 2 rows, got {}",
            batch.rows()
        )));
    }
    Ok(pairwise_distances_unchecked(batch))
}

pub(crate) fn pairwise_distances_unchecked(batch: &Matrix) -> Vec<f64> {
    let n = batch.rows();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for j in 0..n {
        let hj = batch.row(j);
        for k in j + 1..n {
            out.push(euclidean(hj, batch.row(k)));
        }
    }
    out
}

/// Index of the pair `(j, k)`, `j < k`, inside the [`pairwise_distances`] output.
pub fn pair_index(n: usize, j: usize, k: usize) -> usize {
    debug_assert!(j < k && k < n);
    j * (2 * n - j - 1) / 2 + (k - j - 1)
}

/// A principal direction of a centered batch.
#[derive(Clone, Debug)]
pub struct Component {
    pub direction: Vec<f64>,
    /// Sample variance along `direction`.
    pub variance: f64,
}

/// Top principal components by power iteration with deflation.
///
/// Each direction is orthogonalised against the previous ones on every
/// iteration, so a rank-deficient batch yields zero-variance trailing
/// components instead of numerical noise. Signs are fixed so the
/// largest-magnitude loading is positive.
pub fn principal_components(batch: &Matrix, k: usize) -> Result<Vec<Component>> {
    if batch.rows() < 2 {
        return Err(Error::arg("PCA needs at least 2 rows"));
    }
    let d = batch.cols();
    let cov = covariance(batch);
    let scale = (0..d).map(|i| cov[(i, i)]).sum::<f64>();
    let mut found: Vec<Component> = Vec::with_capacity(k);
    let mut rng = Rng::new(0x5CA1_AB1E);
    for _ in 0..k.min(d) {
        if scale <= 0.0 {
            found.push(Component {
                direction: vec![0.0; d],
                variance: 0.0,
            });
            continue;
        }
        let mut v: Vec<f64> = (0..d).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        orthogonalize(&mut v, &found);
        normalize(&mut v);
        let mut lambda = 0.0;
        for _ in 0..20_000 {
            let mut w = mat_vec(&cov, &v);
            for c in &found {
                let p = dot(&c.direction, &v) * c.variance;
                for (wi, ci) in w.iter_mut().zip(&c.direction) {
                    *wi -= p * ci;
                }
            }
            orthogonalize(&mut w, &found);
            let n = norm(&w);
            if n <= 1e-14 * scale {
                lambda = 0.0;
                break;
            }
            w.iter_mut().for_each(|x| *x /= n);
            let delta: f64 = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
            v = w;
            lambda = n;
            if delta < 1e-13 {
                break;
            }
        }
        if lambda <= 1e-12 * scale {
            found.push(Component {
                direction: vec![0.0; d],
                variance: 0.0,
            });
            continue;
        }
        let pivot = argmax(&v.iter().map(|x| x.abs()).collect::<Vec<_>>());
        if v[pivot] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        let variance = dot(&v, &mat_vec(&cov, &v));
        found.push(Component {
            direction: v,
            variance,
        });
    }
    Ok(found)
}

/// Projection of the mean-centered batch onto its top two principal components (n×2).
pub fn pca2(batch: &Matrix) -> Result<Matrix> {
    let comps = principal_components(batch, 2)?;
    let centered = center(batch);
    let mut out = Matrix::zeros(batch.rows(), 2);
    for (c, comp) in comps.iter().enumerate() {
        for r in 0..batch.rows() {
            out[(r, c)] = dot(centered.row(r), &comp.direction);
        }
    }
    Ok(out)
}

pub(crate) fn column_means(batch: &Matrix) -> Vec<f64> {
    let mut means = vec![0.0; batch.cols()];
    for r in batch.row_iter() {
        for (m, v) in means.iter_mut().zip(r) {
            *m += v;
        }
    }
    let n = batch.rows() as f64;
    means.iter_mut().for_each(|m| *m /= n);
    means
}

fn center(batch: &Matrix) -> Matrix {
    let means = column_means(batch);
    Matrix::from_fn(batch.rows(), batch.cols(), |r, c| batch[(r, c)] - means[c])
}

fn covariance(batch: &Matrix) -> Matrix {
    let centered = center(batch);
    centered
        .t_matmul(&centered)
        .expect("square by construction")
        .scale(1.0 / (batch.rows() as f64 - 1.0))
}

fn mat_vec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    m.row_iter().map(|r| dot(r, v)).collect()
}

fn orthogonalize(v: &mut [f64], against: &[Component]) {
    for c in against {
        if c.variance == 0.0 {
            continue;
        }
        let p = dot(v, &c.direction);
        for (vi, ci) in v.iter_mut().zip(&c.direction) {
            *vi -= p * ci;
        }
    }
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}
