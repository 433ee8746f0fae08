//! Synthetic datasets and CSV ingestion.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Distance of every blob center from the origin, in units of the noise
/// scale before standardization.
pub const BLOB_CENTER_RADIUS: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Calib,
    Eval,
}

/// Samples per class in each split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub calib: usize,
    pub eval: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.calib + self.eval
    }
}

/// Fractions of rows assigned to each split when splitting loaded data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub calib: f64,
    pub eval: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.8,
            calib: 0.1,
            eval: 0.1,
        }
    }
}

/// Features, labels and split tags.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    splits: Vec<Split>,
    num_classes: usize,
}

/// The rows of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitData {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn rows(&self, indices: &[usize]) -> Result<SplitData> {
        Ok(SplitData {
            x: self.x.select_rows(indices)?,
            y: indices.iter().map(|&i| self.y[i]).collect(),
        })
    }

    /// The first `n` rows (or all of them).
    pub fn head(&self, n: usize) -> Result<SplitData> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.rows(&idx)
    }

    /// The rows in a seeded random order. Generators store rows grouped by
    /// class, so anything that batches a split should shuffle it first.
    pub fn shuffled(&self, seed: u64) -> Result<SplitData> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        self.rows(&idx)
    }

    /// `n` rows drawn without replacement (all rows if `n >= len`), in a
    /// seeded random order.
    pub fn sample(&self, n: usize, seed: u64) -> Result<SplitData> {
        self.shuffled(seed)?.head(n)
    }

    /// Consecutive batches of at most `size` rows, in stored order.
    pub fn chunks(&self, size: usize) -> Result<Vec<SplitData>> {
        let size = size.max(1);
        (0..self.len())
            .step_by(size)
            .map(|start| {
                let idx: Vec<usize> = (start..(start + size).min(self.len())).collect();
                self.rows(&idx)
            })
            .collect()
    }
}

impl Dataset {
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        splits: Vec<Split>,
        num_classes: usize,
    ) -> Result<Self> {
        let (rows, _) = features.dims2()?;
        if labels.len() != rows || splits.len() != rows {
            return Err(Error::Dimension(format!(
                "{rows} feature rows, {} labels, {} split tags",
                labels.len(),
                splits.len()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Validation(format!(
                "row {i} has label {l}, expected < {num_classes}"
            )));
        }
        features.check_finite("dataset features")?;
        Ok(Dataset {
            features,
            labels,
            splits,
            num_classes,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn split_tags(&self) -> &[Split] {
        &self.splits
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn split(&self, which: Split) -> SplitData {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| self.splits[i] == which)
            .collect();
        SplitData {
            x: self.features.select_rows(&idx).expect("indices in range"),
            y: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn split_len(&self, which: Split) -> usize {
        self.splits.iter().filter(|&&s| s == which).count()
    }
}

fn check_generator(classes: usize, sizes: &SplitSizes) -> Result<()> {
    if classes < 2 {
        return Err(Error::Validation(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    if sizes.train == 0 {
        return Err(Error::Validation("train split must not be empty".into()));
    }
    Ok(())
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Unit-norm class directions: orthonormal when `classes <= dim` (a regular
/// simplex), otherwise independent random directions.
fn blob_centers(classes: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(classes);
    for c in 0..classes {
        let mut v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        if c < dim {
            for u in &centers {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= norm);
        centers.push(v);
    }
    centers
}

fn assemble(
    classes: usize,
    dim: usize,
    sizes: &SplitSizes,
    mut sample: impl FnMut(usize) -> Vec<f64>,
) -> (Vec<f64>, Vec<usize>, Vec<Split>) {
    let mut values = Vec::with_capacity(classes * sizes.total() * dim);
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    for c in 0..classes {
        for (split, n) in [
            (Split::Train, sizes.train),
            (Split::Calib, sizes.calib),
            (Split::Eval, sizes.eval),
        ] {
            for _ in 0..n {
                values.extend(sample(c));
                labels.push(c);
                splits.push(split);
            }
        }
    }
    (values, labels, splits)
}

/// Zero mean, unit variance per column, estimated on the train rows.
fn standardize(values: &mut [f64], dim: usize, splits: &[Split]) {
    let train: Vec<usize> = (0..splits.len())
        .filter(|&i| splits[i] == Split::Train)
        .collect();
    let n = train.len() as f64;
    for j in 0..dim {
        let mean = train.iter().map(|&i| values[i * dim + j]).sum::<f64>() / n;
        let var = train
            .iter()
            .map(|&i| (values[i * dim + j] - mean).powi(2))
            .sum::<f64>()
            / n;
        let std = var.sqrt().max(1e-12);
        for row in values.chunks_exact_mut(dim) {
            row[j] = (row[j] - mean) / std;
        }
    }
}

/// Gaussian clusters around seeded simplex vertices, standardized on the
/// train split.
pub fn make_blobs(
    classes: usize,
    input_dim: usize,
    sizes: SplitSizes,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    check_generator(classes, &sizes)?;
    if input_dim == 0 || !(spread >= 0.0) {
        return Err(Error::Validation(format!(
            "invalid blob parameters: input_dim={input_dim} spread={spread}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = blob_centers(classes, input_dim, &mut rng);
    let (mut values, labels, splits) = assemble(classes, input_dim, &sizes, |c| {
        centers[c]
            .iter()
            .map(|&m| BLOB_CENTER_RADIUS * m + spread * gaussian(&mut rng))
            .collect()
    });
    standardize(&mut values, input_dim, &splits);
    let rows = labels.len();
    Dataset::new(
        Tensor::new(vec![rows, input_dim], values)?,
        labels,
        splits,
        classes,
    )
}

fn ring_point(c: usize, classes: usize, noise: f64, rng: &mut ChaCha8Rng) -> [f64; 2] {
    let angle = rng.random::<f64>() * std::f64::consts::TAU;
    let r = ring_radius(c) + noise * gaussian(rng);
    let scale = 1.0 / ring_radius(classes - 1);
    [r * angle.cos() * scale, r * angle.sin() * scale]
}

/// Radius of class `c` before rescaling; the innermost ring sits at 2 so
/// that no half-plane separates two adjacent rings well.
fn ring_radius(c: usize) -> f64 {
    2.0 + c as f64
}

/// Concentric annuli in the plane, one per class, rescaled so the outer
/// ring has radius 1.
pub fn make_rings(classes: usize, sizes: SplitSizes, noise: f64, seed: u64) -> Result<Dataset> {
    check_generator(classes, &sizes)?;
    if !(noise >= 0.0) {
        return Err(Error::Validation(format!("invalid ring noise {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (values, labels, splits) = assemble(classes, 2, &sizes, |c| {
        ring_point(c, classes, noise, &mut rng).to_vec()
    });
    let rows = labels.len();
    Dataset::new(Tensor::new(vec![rows, 2], values)?, labels, splits, classes)
}

/// Blob features in the first `input_dim - 2` columns and a ring pair in
/// the last two; both carry the class. Standardized on the train split.
pub fn make_mixture(
    classes: usize,
    input_dim: usize,
    sizes: SplitSizes,
    spread: f64,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    check_generator(classes, &sizes)?;
    if input_dim < 3 || !(spread >= 0.0) || !(noise >= 0.0) {
        return Err(Error::Validation(format!(
            "invalid mixture parameters: input_dim={input_dim} spread={spread} noise={noise}"
        )));
    }
    let blob_dim = input_dim - 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = blob_centers(classes, blob_dim, &mut rng);
    let (mut values, labels, splits) = assemble(classes, input_dim, &sizes, |c| {
        let mut v: Vec<f64> = centers[c]
            .iter()
            .map(|&m| BLOB_CENTER_RADIUS * m + spread * gaussian(&mut rng))
            .collect();
        v.extend(ring_point(c, classes, noise, &mut rng));
        v
    });
    standardize(&mut values, input_dim, &splits);
    let rows = labels.len();
    Dataset::new(
        Tensor::new(vec![rows, input_dim], values)?,
        labels,
        splits,
        classes,
    )
}

/// Column layout of a CSV file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub label_column: String,
    /// Inferred as `max(label) + 1` when absent.
    pub num_classes: Option<usize>,
    pub fractions: SplitFractions,
    pub seed: u64,
}

impl CsvSchema {
    pub fn new(label_column: impl Into<String>) -> Self {
        CsvSchema {
            label_column: label_column.into(),
            num_classes: None,
            fractions: SplitFractions::default(),
            seed: 0,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Assigns rows to splits by sorting on a seeded hash of the row index.
/// Split sizes are exact: `round(train * n)`, `round(calib * n)`, rest eval.
pub fn hash_split(rows: usize, fractions: SplitFractions, seed: u64) -> Result<Vec<Split>> {
    let f = fractions;
    if [f.train, f.calib, f.eval].iter().any(|v| !(*v >= 0.0))
        || (f.train + f.calib + f.eval - 1.0).abs() > 1e-9
    {
        return Err(Error::Validation(format!(
            "split fractions {}/{}/{} must be non-negative and sum to 1",
            f.train, f.calib, f.eval
        )));
    }
    let mut order: Vec<usize> = (0..rows).collect();
    let key = |i: usize| splitmix64(seed ^ splitmix64(i as u64));
    order.sort_by_key(|&i| (key(i), i));
    let n_train = (f.train * rows as f64).round() as usize;
    let n_calib = ((f.calib * rows as f64).round() as usize).min(rows - n_train);
    let mut splits = vec![Split::Eval; rows];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_calib {
            Split::Calib
        } else {
            Split::Eval
        };
    }
    Ok(splits)
}

/// Reads a header row plus numeric rows. Every column other than the label
/// column is a feature.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == schema.label_column)
        .ok_or_else(|| {
            Error::Validation(format!(
                "{}: no column named {:?} (found {:?})",
                path.display(),
                schema.label_column,
                headers.iter().collect::<Vec<_>>()
            ))
        })?;
    let dim = headers.len() - 1;
    if dim == 0 {
        return Err(Error::Validation(format!(
            "{}: no feature columns",
            path.display()
        )));
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut label_lines = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != headers.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        for (j, field) in record.iter().enumerate() {
            if j == label_idx {
                let label: usize = field.parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("label {field:?} is not a class index"),
                })?;
                labels.push(label);
                label_lines.push(line);
            } else {
                let v: f64 = field.parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("field {:?} = {field:?} is not a number", &headers[j]),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line,
                        message: format!("non-finite value in {:?}", &headers[j]),
                    });
                }
                values.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::Validation(format!(
            "{}: no data rows",
            path.display()
        )));
    }
    let num_classes = schema
        .num_classes
        .unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    if let Some(i) = labels.iter().position(|&l| l >= num_classes) {
        return Err(Error::Validation(format!(
            "{} line {}: label {} outside 0..{num_classes}",
            path.display(),
            label_lines[i],
            labels[i]
        )));
    }
    let rows = labels.len();
    let splits = hash_split(rows, schema.fractions, schema.seed)?;
    Dataset::new(
        Tensor::new(vec![rows, dim], values)?,
        labels,
        splits,
        num_classes,
    )
}

/// Writes features as `f0..f{d-1}` followed by the label column.
pub fn write_csv(dataset: &Dataset, path: &Path, label_column: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header: Vec<String> = (0..dataset.input_dim()).map(|j| format!("f{j}")).collect();
    header.push(label_column.to_string());
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for i in 0..dataset.len() {
        let mut rec: Vec<String> = dataset
            .features()
            .row(i)
            .iter()
            .map(|v| v.to_string())
            .collect();
        rec.push(dataset.labels()[i].to_string());
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            line,
            message: format!("{}: {other:?}", path.display()),
        },
    }
}
