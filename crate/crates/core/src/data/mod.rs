//! Dataset loading, encoding and vertical partitioning.
//!
//! Every loader produces a [`Table`] (features scaled to `[0, 1]`, integer
//! class labels, stable row ids). [`partition_vertical`] then splits its
//! columns between passive parties.

mod csv_table;
mod idx;
mod partition;
mod synthetic;

use serde::{Deserialize, Serialize};

pub use csv_table::{load_csv, ColumnKind, ColumnSpec, CsvSchema, CsvTable};
pub use idx::load_idx;
pub use partition::{partition_vertical, ImageCut, PartitionPlan};
pub use synthetic::{bayes_accuracy_two_class, make_synthetic, make_synthetic_draw, SyntheticSpec};

use crate::numerics::{Matrix, Rng};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Encoded features with labels, before partitioning.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Original sample ids, shared by all parties after partitioning.
    pub ids: Vec<usize>,
    /// `(rows, cols)` when every feature row is a flattened image.
    pub image_shape: Option<(usize, usize)>,
}

impl Table {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::shape(format!(
                "{} feature rows vs {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::arg(format!("label {bad} outside {num_classes} classes")));
        }
        let ids = (0..labels.len()).collect();
        Ok(Self {
            features,
            labels,
            num_classes,
            ids,
            image_shape: None,
        })
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn select(&self, indices: &[usize]) -> Table {
        Table {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            image_shape: self.image_shape,
        }
    }

    /// Seeded shuffle into `(train, test)` with `test_fraction` of the rows
    /// held out.
    pub fn split(&self, test_fraction: f64, rng: &mut Rng) -> Result<(Table, Table)> {
        let (train, test) = split_indices(self.rows(), test_fraction, rng)?;
        Ok((self.select(&train), self.select(&test)))
    }
}

/// Shuffled, disjoint train/test index sets.
pub fn split_indices(n: usize, test_fraction: f64, rng: &mut Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::arg(format!(
            "test fraction must lie in [0, 1), got {test_fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let test_len = (n as f64 * test_fraction).round() as usize;
    let test = order.split_off(n - test_len);
    Ok((order, test))
}

/// Per-party feature blocks of aligned samples; labels stay with the
/// active party.
#[derive(Clone, Debug, PartialEq)]
pub struct VerticalDataset {
    pub parties: Vec<Matrix>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    pub ids: Vec<usize>,
}

impl VerticalDataset {
    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn party_dims(&self) -> Vec<usize> {
        self.parties.iter().map(Matrix::cols).collect()
    }

    /// The same rows from every party.
    pub fn select(&self, indices: &[usize]) -> VerticalDataset {
        VerticalDataset {
            parties: self.parties.iter().map(|p| p.select_rows(indices)).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    /// Party blocks concatenated left to right.
    pub fn joined(&self) -> Matrix {
        let blocks: Vec<&Matrix> = self.parties.iter().collect();
        Matrix::hconcat(&blocks).expect("parties share the row count")
    }
}
