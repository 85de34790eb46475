use serde::{Deserialize, Serialize};

use super::Table;
use crate::numerics::{euclidean, gaussian_sample, normal_cdf, Matrix, Rng};
use crate::{Error, Result};

const MEANS_STREAM: u64 = 0x6d65616e;
const SAMPLES_STREAM: u64 = 0x73616d70;

/// Isotropic Gaussian blobs, one per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Standard deviation of every blob.
    pub spread: f64,
    /// Standard deviation of the class means around the origin.
    #[serde(default = "one")]
    pub separation: f64,
    pub seed: u64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn one() -> f64 {
    1.0
}

fn default_test_fraction() -> f64 {
    0.2
}

impl SyntheticSpec {
    /// Class means, a function of `seed` alone.
    pub fn class_means(&self) -> Matrix {
        let mut rng = Rng::new(self.seed).derive(&[MEANS_STREAM]);
        gaussian_sample(&mut rng, 0.0, self.separation, (self.classes, self.dim))
            .expect("separation validated")
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::arg(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.dim == 0 || self.per_class == 0 {
            return Err(Error::arg("synthetic data needs dim > 0 and per_class > 0"));
        }
        if !(self.spread >= 0.0) || !(self.separation >= 0.0) {
            return Err(Error::arg("spread and separation must be >= 0"));
        }
        Ok(())
    }
}

/// Draws the blobs and splits them into `(train, test)`.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<(Table, Table)> {
    make_synthetic_draw(spec, 0)
}

/// A further independent sample from the same class means; `draw = 0` is
/// [`make_synthetic`].
pub fn make_synthetic_draw(spec: &SyntheticSpec, draw: u64) -> Result<(Table, Table)> {
    spec.validate()?;
    let means = spec.class_means();
    let n = spec.classes * spec.per_class;
    let mut rng = Rng::new(spec.seed).derive(&[SAMPLES_STREAM, draw]);
    let noise = gaussian_sample(&mut rng, 0.0, spec.spread, (n, spec.dim))?;
    let labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
    let features = Matrix::from_fn(n, spec.dim, |r, c| means[(labels[r], c)] + noise[(r, c)]);
    let table = Table::new(features, labels, spec.classes)?;
    table.split(spec.test_fraction, &mut rng)
}

/// Bayes-optimal accuracy for two equiprobable isotropic blobs with the given
/// means and common standard deviation: `Φ(‖μ₀ − μ₁‖ / 2s)`.
pub fn bayes_accuracy_two_class(mean0: &[f64], mean1: &[f64], spread: f64) -> f64 {
    let gap = euclidean(mean0, mean1);
    if spread == 0.0 {
        return if gap > 0.0 { 1.0 } else { 0.5 };
    }
    normal_cdf(gap / (2.0 * spread))
}
