use serde::{Deserialize, Serialize};

use super::distance_grad_to_batch;
use crate::dp::EmbeddingBatch;
use crate::numerics::{pairwise_distances, Matrix};
use crate::{Error, Result};

/// How the distance-distribution term is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMode {
    /// `skew² + excess_kurtosis²` of the distance sample.
    #[default]
    Moments,
    /// Soft-binned histogram KL against the fitted normal; the fit is not
    /// differentiated through.
    Histogram,
}

const HISTOGRAM_BINS: usize = 24;

/// Moment-matching surrogate for the KL divergence between the pairwise
/// distance sample and its Gaussian fit: `α·(skew² + excess_kurtosis²)`.
///
/// Returns the loss and its gradient with respect to the batch rows.
pub fn kl_surrogate_loss(batch: &EmbeddingBatch, alpha: f64) -> Result<(f64, Matrix)> {
    kl_loss(batch, alpha, KlMode::Moments)
}

/// [`kl_surrogate_loss`] with a selectable evaluation mode.
pub fn kl_loss(
    batch: &EmbeddingBatch,
    alpha: f64,
    mode: KlMode,
) -> Result<(f64, Matrix)> {
    if batch.rows() < 4 {
        return Err(Error::arg(format!(
            "distance-distribution loss needs at least 4 rows, got {}",
            batch.rows()
        )));
    }
    if !(alpha >= 0.0) {
        return Err(Error::arg(format!("alpha must be >= 0, got {alpha}")));
    }
    let data = &batch.data;
    if alpha == 0.0 {
        return Ok((0.0, Matrix::zeros(data.rows(), data.cols())));
    }
    let d = pairwise_distances(data)?;
    let (loss, dgrad) = match mode {
        KlMode::Moments => moment_loss(&d),
        KlMode::Histogram => {
            let n = d.len() as f64;
            let mu = d.iter().sum::<f64>() / n;
            let sd = (d.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n).sqrt();
            histogram_kl(&d, mu, sd)
        }
    };
    let grad = distance_grad_to_batch(data, &d, &dgrad).scale(alpha);
    Ok((alpha * loss, grad))
}

/// `skew² + excess_kurtosis²` (population moments) and its gradient with
/// respect to each distance.
pub(crate) fn moment_loss(d: &[f64]) -> (f64, Vec<f64>) {
    let p = d.len() as f64;
    let mu = d.iter().sum::<f64>() / p;
    let central = |r: i32| d.iter().map(|x| (x - mu).powi(r)).sum::<f64>() / p;
    let (m2, m3, m4) = (central(2), central(3), central(4));
    if !(m2 > 1e-24 * mu.abs().max(1.0).powi(2)) {
        // equal distances: shape is undefined, nothing to push on
        return (0.0, vec![0.0; d.len()]);
    }
    let skew = m3 / m2.powf(1.5);
    let kurt = m4 / (m2 * m2) - 3.0;
    let loss = skew * skew + kurt * kurt;
    // ∂m_r/∂d_i = (r/P)((d_i−μ)^{r−1} − m_{r−1}), with m_1 = 0
    let grad = d
        .iter()
        .map(|&x| {
            let c = x - mu;
            let dm2 = 2.0 / p * c;
            let dm3 = 3.0 / p * (c * c - m2);
            let dm4 = 4.0 / p * (c * c * c - m3);
            let dskew = dm3 / m2.powf(1.5) - 1.5 * m3 / m2.powf(2.5) * dm2;
            let dkurt = dm4 / (m2 * m2) - 2.0 * m4 / (m2 * m2 * m2) * dm2;
            2.0 * skew * dskew + 2.0 * kurt * dkurt
        })
        .collect();
    (loss, grad)
}

/// `KL(p ‖ q)` between a Gaussian-kernel soft histogram `p` of `d` and the
/// binned density `q` of `N(mu, sd²)`, over `mu ± 4·sd`. `mu` and `sd` are
/// treated as constants.
pub(crate) fn histogram_kl(d: &[f64], mu: f64, sd: f64) -> (f64, Vec<f64>) {
    if !(sd > 0.0) {
        return (0.0, vec![0.0; d.len()]);
    }
    let width = 8.0 * sd / HISTOGRAM_BINS as f64;
    let centres: Vec<f64> = (0..HISTOGRAM_BINS)
        .map(|b| mu - 4.0 * sd + (b as f64 + 0.5) * width)
        .collect();
    let q_raw: Vec<f64> = centres
        .iter()
        .map(|c| (-0.5 * ((c - mu) / sd).powi(2)).exp())
        .collect();
    let q_total: f64 = q_raw.iter().sum();
    let q: Vec<f64> = q_raw.iter().map(|v| v / q_total).collect();

    let kernel = |x: f64, c: f64| (-0.5 * ((x - c) / width).powi(2)).exp();
    let mut w = [0.0; HISTOGRAM_BINS];
    for &x in d {
        for (wb, &c) in w.iter_mut().zip(&centres) {
            *wb += kernel(x, c);
        }
    }
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return (0.0, vec![0.0; d.len()]);
    }
    const FLOOR: f64 = 1e-12;
    let p: Vec<f64> = w.iter().map(|v| v / total).collect();
    let loss: f64 = p.iter().zip(&q).map(|(pb, qb)| pb * ((pb + FLOOR) / qb).ln()).sum();
    // ∂KL/∂p_b, then through the normalisation p_b = w_b / Σw
    let dp: Vec<f64> = p
        .iter()
        .zip(&q)
        .map(|(pb, qb)| ((pb + FLOOR) / qb).ln() + pb / (pb + FLOOR))
        .collect();
    let mean_dp: f64 = dp.iter().zip(&p).map(|(a, b)| a * b).sum();
    let dw: Vec<f64> = dp.iter().map(|g| (g - mean_dp) / total).collect();
    let grad = d
        .iter()
        .map(|&x| {
            centres
                .iter()
                .zip(&dw)
                .map(|(&c, g)| g * kernel(x, c) * (-(x - c) / (width * width)))
                .sum()
        })
        .collect();
    (loss, grad)
}
