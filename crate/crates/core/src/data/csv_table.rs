use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Table;
use crate::numerics::{Matrix, Rng};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
    Label,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
}

/// Columns to read from a headed CSV file. File columns not listed are
/// ignored; exactly one column must be the label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub columns: Vec<ColumnSpec>,
}

impl CsvSchema {
    fn label(&self) -> Result<&ColumnSpec> {
        let mut labels = self.columns.iter().filter(|c| c.kind == ColumnKind::Label);
        match (labels.next(), labels.next()) {
            (Some(l), None) => Ok(l),
            _ => Err(Error::arg("schema must declare exactly one label column")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum RawColumn {
    Numeric { name: String, values: Vec<f64> },
    Categorical { name: String, values: Vec<String> },
}

/// Parsed but not yet encoded CSV contents.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvTable {
    path: PathBuf,
    columns: Vec<RawColumn>,
    labels: Vec<usize>,
    class_names: Vec<String>,
}

fn csv_error(path: &Path, err: csv::Error) -> Error {
    let line = err.position().map_or(0, |p| p.line());
    match err.kind() {
        csv::ErrorKind::Io(_) => Error::Format {
            path: path.to_path_buf(),
            detail: err.to_string(),
        },
        _ => Error::Parse {
            path: path.to_path_buf(),
            line,
            column: "-".into(),
            detail: err.to_string(),
        },
    }
}

/// Reads the schema's columns from a CSV file with a header row.
///
/// Numeric cells must parse as finite numbers. Class labels are indexed by
/// their sorted distinct values (numerically when all are integers).
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<CsvTable> {
    let label_spec = schema.label()?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let position = |name: &str| -> Result<usize> {
        header.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            column: name.to_string(),
            detail: "column missing from header".into(),
        })
    };
    let mut seen = BTreeSet::new();
    for spec in &schema.columns {
        if !seen.insert(spec.name.as_str()) {
            return Err(Error::arg(format!("column {} listed twice in schema", spec.name)));
        }
    }
    let features: Vec<(usize, &ColumnSpec)> = schema
        .columns
        .iter()
        .filter(|c| c.kind != ColumnKind::Label)
        .map(|c| Ok((position(&c.name)?, c)))
        .collect::<Result<_>>()?;
    let label_pos = position(&label_spec.name)?;

    let mut columns: Vec<RawColumn> = features
        .iter()
        .map(|(_, spec)| match spec.kind {
            ColumnKind::Numeric => RawColumn::Numeric {
                name: spec.name.clone(),
                values: Vec::new(),
            },
            _ => RawColumn::Categorical {
                name: spec.name.clone(),
                values: Vec::new(),
            },
        })
        .collect();
    let mut raw_labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        for ((pos, spec), column) in features.iter().zip(columns.iter_mut()) {
            let cell = &record[*pos];
            match column {
                RawColumn::Numeric { values, .. } => {
                    let v: f64 = cell.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| {
                        Error::Parse {
                            path: path.to_path_buf(),
                            line,
                            column: spec.name.clone(),
                            detail: format!("expected a number, found {cell:?}"),
                        }
                    })?;
                    values.push(v);
                }
                RawColumn::Categorical { values, .. } => values.push(cell.to_string()),
            }
        }
        raw_labels.push(record[label_pos].to_string());
    }
    let (labels, class_names) = index_labels(&raw_labels);
    Ok(CsvTable {
        path: path.to_path_buf(),
        columns,
        labels,
        class_names,
    })
}

fn index_labels(raw: &[String]) -> (Vec<usize>, Vec<String>) {
    let mut names: Vec<String> = raw.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if names.iter().all(|n| n.parse::<i64>().is_ok()) {
        names.sort_by_key(|n| n.parse::<i64>().unwrap());
    }
    let index: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let labels = raw.iter().map(|r| index[r.as_str()]).collect();
    (labels, names)
}

enum Encoder {
    MinMax { min: f64, max: f64 },
    OneHot { vocabulary: Vec<String> },
}

impl CsvTable {
    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// Encodes rows `train` and `test` with statistics fitted on `train`
    /// only: numeric min-max scaling to `[0, 1]` (test values clamped) and
    /// one-hot categories, where unseen test categories encode as zeros.
    pub fn encode(&self, train: &[usize], test: &[usize]) -> Result<(Table, Table)> {
        if train.is_empty() {
            return Err(Error::arg(format!("{}: no training rows", self.path.display())));
        }
        let encoders: Vec<Encoder> = self
            .columns
            .iter()
            .map(|c| match c {
                RawColumn::Numeric { values, .. } => {
                    let (min, max) = train.iter().map(|&i| values[i]).fold(
                        (f64::INFINITY, f64::NEG_INFINITY),
                        |(lo, hi), v| (lo.min(v), hi.max(v)),
                    );
                    Encoder::MinMax { min, max }
                }
                RawColumn::Categorical { values, .. } => Encoder::OneHot {
                    vocabulary: train
                        .iter()
                        .map(|&i| values[i].clone())
                        .collect::<BTreeSet<_>>()
                        .into_iter()
                        .collect(),
                },
            })
            .collect();
        let width: usize = encoders
            .iter()
            .map(|e| match e {
                Encoder::MinMax { .. } => 1,
                Encoder::OneHot { vocabulary } => vocabulary.len(),
            })
            .sum();
        let encode_rows = |rows: &[usize]| -> Result<Table> {
            let mut features = Matrix::zeros(rows.len(), width);
            for (r, &i) in rows.iter().enumerate() {
                let out = features.row_mut(r);
                let mut offset = 0;
                for (column, encoder) in self.columns.iter().zip(&encoders) {
                    match (column, encoder) {
                        (RawColumn::Numeric { values, .. }, Encoder::MinMax { min, max }) => {
                            out[offset] = if max > min {
                                ((values[i] - min) / (max - min)).clamp(0.0, 1.0)
                            } else {
                                0.0
                            };
                            offset += 1;
                        }
                        (RawColumn::Categorical { values, .. }, Encoder::OneHot { vocabulary }) => {
                            if let Ok(k) = vocabulary.binary_search(&values[i]) {
                                out[offset + k] = 1.0;
                            }
                            offset += vocabulary.len();
                        }
                        _ => unreachable!("encoders follow column kinds"),
                    }
                }
            }
            let mut table = Table::new(
                features,
                rows.iter().map(|&i| self.labels[i]).collect(),
                self.class_names.len(),
            )?;
            table.ids = rows.to_vec();
            Ok(table)
        };
        Ok((encode_rows(train)?, encode_rows(test)?))
    }

    /// Seeded random split, then [`CsvTable::encode`].
    pub fn encode_split(&self, test_fraction: f64, rng: &mut Rng) -> Result<(Table, Table)> {
        let (train, test) = super::split_indices(self.rows(), test_fraction, rng)?;
        self.encode(&train, &test)
    }

    /// Names of the encoded feature columns (`name=value` for one-hot blocks).
    pub fn feature_names(&self, train: &[usize]) -> Vec<String> {
        self.columns
            .iter()
            .flat_map(|c| match c {
                RawColumn::Numeric { name, .. } => vec![name.clone()],
                RawColumn::Categorical { name, values } => train
                    .iter()
                    .map(|&i| values[i].clone())
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .map(|v| format!("{name}={v}"))
                    .collect(),
            })
            .collect()
    }
}
