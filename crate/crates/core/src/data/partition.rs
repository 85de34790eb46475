use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{Split, Table, VerticalDataset};
use crate::{Error, Result};

/// How an image is cut between two parties.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageCut {
    /// Party 0 gets the left half, party 1 the right half.
    LeftRight,
    /// Party 0 gets the top half, party 1 the bottom half.
    TopBottom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionPlan {
    /// One column range per party.
    Columns(Vec<Range<usize>>),
    Image(ImageCut),
}

impl PartitionPlan {
    /// Near-equal contiguous column blocks for `parties` parties.
    pub fn even(columns: usize, parties: usize) -> Self {
        let parties = parties.max(1);
        PartitionPlan::Columns(
            (0..parties)
                .map(|p| (p * columns / parties)..((p + 1) * columns / parties))
                .collect(),
        )
    }

    fn column_sets(&self, table: &Table) -> Result<Vec<Vec<usize>>> {
        match self {
            PartitionPlan::Columns(ranges) => Ok(ranges.iter().map(|r| r.clone().collect()).collect()),
            PartitionPlan::Image(cut) => {
                let (rows, cols) = table
                    .image_shape
                    .ok_or_else(|| Error::arg("image partition on a table without image shape"))?;
                let mut a = Vec::new();
                let mut b = Vec::new();
                for r in 0..rows {
                    for c in 0..cols {
                        let first = match cut {
                            ImageCut::LeftRight => c < cols / 2,
                            ImageCut::TopBottom => r < rows / 2,
                        };
                        if first { &mut a } else { &mut b }.push(r * cols + c);
                    }
                }
                Ok(vec![a, b])
            }
        }
    }
}

/// Splits the table's columns among parties; every feature column must be
/// assigned exactly once.
pub fn partition_vertical(table: &Table, plan: &PartitionPlan, split: Split) -> Result<VerticalDataset> {
    let sets = plan.column_sets(table)?;
    let width = table.features.cols();
    let mut owner = vec![None; width];
    for (party, set) in sets.iter().enumerate() {
        if set.is_empty() {
            return Err(Error::arg(format!("partition plan gives party {party} no columns")));
        }
        for &c in set {
            match owner.get_mut(c) {
                None => {
                    return Err(Error::arg(format!(
                        "partition plan column {c} outside {width} features"
                    )))
                }
                Some(Some(prev)) => {
                    return Err(Error::arg(format!(
                        "partition plan assigns column {c} to parties {prev} and {party}"
                    )))
                }
                Some(slot) => *slot = Some(party),
            }
        }
    }
    if let Some(c) = owner.iter().position(Option::is_none) {
        return Err(Error::arg(format!("partition plan leaves column {c} unassigned")));
    }
    Ok(VerticalDataset {
        parties: sets.iter().map(|s| table.features.select_col_indices(s)).collect(),
        labels: table.labels.clone(),
        num_classes: table.num_classes,
        split,
        ids: table.ids.clone(),
    })
}
