//! Dataset ingestion, standardization and vertical partitioning.
//!
//! A [`VflSplit`] is the full vertical partition: a row-aligned overlap that
//! every client holds (with labels kept on the server side) plus one disjoint
//! pool of unaligned rows per client. Unaligned rows only ever carry the
//! owning client's columns.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub feature_names: Vec<String>,
    /// Raw label value for each class index.
    pub class_values: Vec<String>,
}

impl Dataset {
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        feature_names: Vec<String>,
        class_values: Vec<String>,
    ) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::shape(format!(
                "{} feature rows for {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if feature_names.len() != features.cols() {
            return Err(Error::shape("feature name count differs from column count"));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("dataset features"));
        }
        let classes = class_values.len();
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Self {
            features,
            labels,
            feature_names,
            class_values,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_values.len()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            feature_names: self.feature_names.clone(),
            class_values: self.class_values.clone(),
        }
    }

    /// Seeded shuffle into `(train, test)` with `round(n * test_fraction)` test rows.
    pub fn train_test_split(&self, test_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::invalid(format!(
                "test fraction {test_fraction} outside [0, 1)"
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = (self.len() as f64 * test_fraction).round() as usize;
        let (test, train) = order.split_at(n_test);
        Ok((self.select_rows(train), self.select_rows(test)))
    }

    /// Writes features followed by a `label` column holding the raw class value.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = csv::Writer::from_writer(file);
        let mut header = self.feature_names.clone();
        header.push("label".to_owned());
        writer.write_record(&header)?;
        for (row, &label) in self.features.iter_rows().zip(&self.labels) {
            let mut record: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            record.push(self.class_values[label].clone());
            writer.write_record(&record)?;
        }
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// How a CSV file maps onto a [`Dataset`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvOptions {
    /// Header name, or a zero-based column index when there is no header.
    pub label_column: String,
    pub has_header: bool,
    /// Columns to ignore entirely, such as row identifiers.
    pub drop_columns: Vec<String>,
}

impl CsvOptions {
    pub fn new(label_column: impl Into<String>) -> Self {
        Self {
            label_column: label_column.into(),
            has_header: true,
            drop_columns: Vec::new(),
        }
    }
}

pub fn load_csv(path: &Path, opts: &CsvOptions) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(opts.has_header)
        .trim(csv::Trim::All)
        .from_reader(file);
    let records: Vec<csv::StringRecord> =
        reader.records().collect::<std::result::Result<_, _>>()?;
    let width = records.first().map_or(0, csv::StringRecord::len);
    let names: Vec<String> = if opts.has_header {
        reader.headers()?.iter().map(str::to_owned).collect()
    } else {
        (0..width).map(|j| j.to_string()).collect()
    };
    let label_idx = names
        .iter()
        .position(|n| n == &opts.label_column)
        .ok_or_else(|| Error::MissingColumn(opts.label_column.clone()))?;
    for d in &opts.drop_columns {
        if !names.contains(d) {
            return Err(Error::MissingColumn(d.clone()));
        }
    }
    let feature_cols: Vec<usize> = (0..names.len())
        .filter(|&j| j != label_idx && !opts.drop_columns.contains(&names[j]))
        .collect();

    let mut data = Vec::with_capacity(records.len() * feature_cols.len());
    let mut raw_labels = Vec::with_capacity(records.len());
    for (row, record) in records.iter().enumerate() {
        for &j in &feature_cols {
            let cell = record.get(j).unwrap_or("");
            let value: f64 = cell
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    row,
                    column: names[j].clone(),
                    value: cell.to_owned(),
                })?;
            data.push(value);
        }
        let label = record.get(label_idx).unwrap_or("");
        if label.is_empty() {
            return Err(Error::Parse {
                row,
                column: names[label_idx].clone(),
                value: String::new(),
            });
        }
        raw_labels.push(label.to_owned());
    }

    let class_values = sorted_class_values(&raw_labels);
    let labels = raw_labels
        .iter()
        .map(|l| {
            class_values
                .iter()
                .position(|c| c == l)
                .expect("value was collected")
        })
        .collect();
    Dataset::new(
        Matrix::from_vec(records.len(), feature_cols.len(), data)?,
        labels,
        feature_cols.iter().map(|&j| names[j].clone()).collect(),
        class_values,
    )
}

/// Distinct label strings, numerically ordered when every value parses as a number.
fn sorted_class_values(raw: &[String]) -> Vec<String> {
    let distinct: BTreeSet<&String> = raw.iter().collect();
    let mut values: Vec<String> = distinct.into_iter().cloned().collect();
    let numeric: Option<Vec<f64>> = values.iter().map(|v| v.parse().ok()).collect();
    if let Some(nums) = numeric {
        let mut paired: Vec<(f64, String)> = nums.into_iter().zip(values).collect();
        paired.sort_by(|a, b| a.0.total_cmp(&b.0));
        values = paired.into_iter().map(|(_, v)| v).collect();
    }
    values
}

/// Per-feature statistics used to standardize a matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Features with zero spread; they standardize to 0.
    pub constant: Vec<bool>,
}

impl Standardizer {
    pub fn fit(x: &Matrix) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::invalid("cannot standardize an empty matrix"));
        }
        let n = x.rows() as f64;
        let mean = x.col_means();
        let mut var = vec![0.0; x.cols()];
        for row in x.iter_rows() {
            for ((v, m), s) in row.iter().zip(&mean).zip(var.iter_mut()) {
                *s += (v - m) * (v - m);
            }
        }
        let std: Vec<f64> = var.iter().map(|s| (s / n).sqrt()).collect();
        let constant = std
            .iter()
            .zip(&mean)
            .map(|(&s, m)| s <= 1e-12 * m.abs().max(1.0))
            .collect();
        Ok(Self {
            mean,
            std,
            constant,
        })
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.mean.len() {
            return Err(Error::shape(format!(
                "standardizer fitted on {} features, got {}",
                self.mean.len(),
                x.cols()
            )));
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = if self.constant[j] {
                    0.0
                } else {
                    (*v - self.mean[j]) / self.std[j]
                };
            }
        }
        Ok(out)
    }
}

pub fn standardize(d: &Dataset) -> Result<(Dataset, Standardizer)> {
    let stats = Standardizer::fit(&d.features)?;
    let mut out = d.clone();
    out.features = stats.apply(&d.features)?;
    Ok((out, stats))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub client_columns: Vec<Vec<usize>>,
    pub overlap: usize,
    pub seed: u64,
}

impl SplitSpec {
    /// First `first` columns to client 0, the rest to client 1.
    pub fn two_way(num_features: usize, first: usize, overlap: usize, seed: u64) -> Self {
        Self {
            client_columns: vec![(0..first).collect(), (first..num_features).collect()],
            overlap,
            seed,
        }
    }

    pub fn validate(&self, num_features: usize, num_rows: usize) -> Result<()> {
        if self.client_columns.len() < 2 {
            return Err(Error::invalid(
                "a vertical split needs at least two clients",
            ));
        }
        let mut seen = vec![false; num_features];
        for (k, cols) in self.client_columns.iter().enumerate() {
            if cols.is_empty() {
                return Err(Error::invalid(format!("client {k} has no columns")));
            }
            for &c in cols {
                if c >= num_features {
                    return Err(Error::invalid(format!(
                        "client {k} column {c} out of range for {num_features} features"
                    )));
                }
                if seen[c] {
                    return Err(Error::invalid(format!("column {c} assigned twice")));
                }
                seen[c] = true;
            }
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(Error::invalid(format!("column {c} assigned to no client")));
        }
        if self.overlap == 0 || self.overlap > num_rows {
            return Err(Error::invalid(format!(
                "overlap size {} must be in 1..={num_rows}",
                self.overlap
            )));
        }
        Ok(())
    }
}

/// One client's share of a vertical partition.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    /// Original column indices, in the order they appear in the matrices below.
    pub columns: Vec<usize>,
    pub feature_names: Vec<String>,
    /// Row `i` is overlap sample `i` for every client.
    pub overlap: Matrix,
    pub unaligned: Matrix,
    /// Original dataset row of each unaligned row.
    pub unaligned_rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VflSplit {
    pub clients: Vec<ClientShard>,
    /// Server-side labels of the overlap.
    pub overlap_labels: Vec<usize>,
    /// Original dataset row of each overlap sample.
    pub overlap_rows: Vec<usize>,
    pub num_classes: usize,
}

impl VflSplit {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn overlap_size(&self) -> usize {
        self.overlap_rows.len()
    }
}

/// Samples the overlap without replacement, then deals the remaining rows
/// evenly and randomly to the clients' unaligned pools. Labels of unaligned
/// rows are dropped.
pub fn vertical_partition(d: &Dataset, spec: &SplitSpec) -> Result<VflSplit> {
    spec.validate(d.num_features(), d.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.shuffle(&mut rng);
    let (overlap_rows, rest) = order.split_at(spec.overlap);
    let k = spec.client_columns.len();
    // rest is already a random permutation, so round-robin dealing is an even random split
    let mut pools: Vec<Vec<usize>> = vec![Vec::with_capacity(rest.len() / k + 1); k];
    for (i, &row) in rest.iter().enumerate() {
        pools[i % k].push(row);
    }
    let clients = spec
        .client_columns
        .iter()
        .zip(pools)
        .map(|(cols, pool)| ClientShard {
            columns: cols.clone(),
            feature_names: cols.iter().map(|&c| d.feature_names[c].clone()).collect(),
            overlap: d.features.select_rows(overlap_rows).select_cols(cols),
            unaligned: d.features.select_rows(&pool).select_cols(cols),
            unaligned_rows: pool,
        })
        .collect();
    Ok(VflSplit {
        clients,
        overlap_labels: overlap_rows.iter().map(|&i| d.labels[i]).collect(),
        overlap_rows: overlap_rows.to_vec(),
        num_classes: d.num_classes(),
    })
}

/// Writes a small JSON manifest next to generated data.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(text.as_bytes())
        .and_then(|_| file.write_all(b"\n"))
        .map_err(|e| Error::io(path, e))
}
