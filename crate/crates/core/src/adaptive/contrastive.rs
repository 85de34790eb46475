use log::warn;

use super::FuzzyAssignment;
use crate::dp::EmbeddingBatch;
use crate::numerics::{euclidean, Matrix};
use crate::{Error, Result};

/// Weakly supervised contrastive loss over retained rows:
/// `−β/n² · Σ_j Σ_k (1 − ω_jk)·‖h_j − h_k‖`, with `ω_jk = 1` for rows sharing
/// a cluster id and `n` the full batch size.
///
/// Minimising it pushes rows from different clusters apart. Fewer than two
/// retained rows yield a zero loss and gradient.
pub fn contrastive_loss(
    batch: &EmbeddingBatch,
    assignment: &FuzzyAssignment,
    beta: f64,
) -> Result<(f64, Matrix)> {
    let data = &batch.data;
    let n = data.rows();
    if assignment.len() != n {
        return Err(Error::shape(format!(
            "contrastive loss: {} assignments for {n} rows",
            assignment.len()
        )));
    }
    let mut grad = Matrix::zeros(n, data.cols());
    let kept: Vec<usize> = (0..n).filter(|&i| assignment.retained_mask[i]).collect();
    if kept.len() < 2 {
        warn!(
            "contrastive loss skipped: {} retained rows in batch {}",
            kept.len(),
            batch.batch_index
        );
        return Ok((0.0, grad));
    }
    let scale = beta / (n * n) as f64;
    let mut sum = 0.0;
    for (a, &j) in kept.iter().enumerate() {
        for &k in &kept[a + 1..] {
            if assignment.cluster_ids[j] == assignment.cluster_ids[k] {
                continue;
            }
            let d = euclidean(data.row(j), data.row(k));
            // both ordered pairs (j,k) and (k,j)
            sum += 2.0 * d;
            if d == 0.0 {
                continue;
            }
            let coef = -2.0 * scale / d;
            for c in 0..data.cols() {
                let diff = data[(j, c)] - data[(k, c)];
                grad.row_mut(j)[c] += coef * diff;
                grad.row_mut(k)[c] -= coef * diff;
            }
        }
    }
    Ok((-scale * sum, grad))
}
