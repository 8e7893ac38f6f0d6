//! Imbalanced class profiles, synthetic datasets and CSV I/O.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::losses::ClassCounts;
use crate::numerics::{check_finite, RandomSource};

/// Row-major feature matrix with one label per row. Class 0 is taken to be
/// the most frequent class by convention of the generators.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    dims: usize,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        dims: usize,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if dims == 0 {
            return Err(invalid("feature dimension must be positive"));
        }
        if features.len() != labels.len() * dims {
            return Err(Error::LengthMismatch {
                expected: labels.len() * dims,
                got: features.len(),
            });
        }
        check_finite(&features)?;
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        Ok(Dataset {
            features,
            dims,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dims..(i + 1) * self.dims]
    }

    /// Samples per class, zeros included.
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Counts as a validated [`ClassCounts`]; fails if a class is empty.
    pub fn class_counts(&self) -> Result<ClassCounts> {
        ClassCounts::new(self.counts())
    }

    /// Rows at the given indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dims);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            features,
            dims: self.dims,
            labels,
            num_classes: self.num_classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileKind {
    Longtail,
    Step,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceProfile {
    pub kind: ProfileKind,
    pub n_max: usize,
    /// Most frequent count divided by least frequent count.
    pub ratio: f64,
    pub num_classes: usize,
}

impl ImbalanceProfile {
    pub fn counts(&self) -> Result<ClassCounts> {
        match self.kind {
            ProfileKind::Longtail => longtail_counts(self),
            ProfileKind::Step => step_counts(self),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.ratio >= 1.0) || !self.ratio.is_finite() {
            return Err(invalid(format!(
                "imbalance ratio must be >= 1, got {}",
                self.ratio
            )));
        }
        if self.n_max == 0 {
            return Err(invalid("n_max must be positive"));
        }
        if self.num_classes < 2 {
            return Err(invalid("need at least 2 classes"));
        }
        Ok(())
    }
}

fn round_count(x: f64) -> usize {
    (x.round() as usize).max(1)
}

/// Exponential profile `n_j = round(n_max * ratio^(-j/(C-1)))`.
pub fn longtail_counts(profile: &ImbalanceProfile) -> Result<ClassCounts> {
    profile.validate()?;
    let last = (profile.num_classes - 1) as f64;
    let counts = (0..profile.num_classes)
        .map(|j| round_count(profile.n_max as f64 * profile.ratio.powf(-(j as f64) / last)))
        .collect();
    ClassCounts::new(counts)
}

/// Two-level profile: the first `ceil(C/2)` classes keep `n_max`, the rest
/// get `round(n_max / ratio)`.
pub fn step_counts(profile: &ImbalanceProfile) -> Result<ClassCounts> {
    profile.validate()?;
    let frequent = profile.num_classes.div_ceil(2);
    let rare = round_count(profile.n_max as f64 / profile.ratio);
    let counts = (0..profile.num_classes)
        .map(|j| if j < frequent { profile.n_max } else { rare })
        .collect();
    ClassCounts::new(counts)
}

/// Uniform subset without replacement per class. Surviving rows keep their
/// original relative order.
pub fn subsample_to_counts(
    data: &Dataset,
    target: &ClassCounts,
    rng: &mut RandomSource,
) -> Result<Dataset> {
    if target.num_classes() != data.num_classes() {
        return Err(Error::LengthMismatch {
            expected: data.num_classes(),
            got: target.num_classes(),
        });
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.num_classes()];
    for (i, &l) in data.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let mut keep = Vec::with_capacity(target.total());
    for (c, (pool, &want)) in by_class.iter_mut().zip(target.as_slice()).enumerate() {
        if want > pool.len() {
            return Err(invalid(format!(
                "class {c}: requested {want} samples but only {} available",
                pool.len()
            )));
        }
        // partial Fisher–Yates: the first `want` slots become the sample
        for i in 0..want {
            let j = i + rng.below((pool.len() - i) as u64) as usize;
            pool.swap(i, j);
        }
        keep.extend_from_slice(&pool[..want]);
    }
    keep.sort_unstable();
    Ok(data.select(&keep))
}

/// Class means for the blob generator: points on a circle of radius
/// `separation` when `dims == 2`, otherwise `separation` times the first
/// `C` standard basis vectors (vertices of a simplex).
pub fn blob_means(num_classes: usize, dims: usize, separation: f64) -> Result<Vec<Vec<f64>>> {
    match dims {
        2 => Ok((0..num_classes)
            .map(|c| {
                let angle = 2.0 * PI * c as f64 / num_classes as f64;
                vec![separation * angle.cos(), separation * angle.sin()]
            })
            .collect()),
        d if d > 2 && num_classes <= d => Ok((0..num_classes)
            .map(|c| {
                let mut m = vec![0.0; d];
                m[c] = separation;
                m
            })
            .collect()),
        d => Err(invalid(format!(
            "blobs need dims == 2, or dims >= classes ({num_classes}); got dims {d}"
        ))),
    }
}

/// Isotropic Gaussian blobs around [`blob_means`], rows grouped by class.
pub fn synth_gaussian_blobs(
    counts: &ClassCounts,
    dims: usize,
    separation: f64,
    std: f64,
    rng: &mut RandomSource,
) -> Result<Dataset> {
    if !(separation > 0.0) || !separation.is_finite() {
        return Err(invalid(format!(
            "separation must be positive, got {separation}"
        )));
    }
    if !(std >= 0.0) || !std.is_finite() {
        return Err(invalid(format!("std must be >= 0, got {std}")));
    }
    let means = blob_means(counts.num_classes(), dims, separation)?;
    let mut features = Vec::with_capacity(counts.total() * dims);
    let mut labels = Vec::with_capacity(counts.total());
    for (c, (&n, mean)) in counts.as_slice().iter().zip(&means).enumerate() {
        for _ in 0..n {
            features.extend(mean.iter().map(|&m| m + std * rng.standard_normal()));
            labels.push(c);
        }
    }
    Dataset::new(features, dims, labels, counts.num_classes())
}

#[derive(Debug, Clone, Default)]
pub struct CsvOptions {
    /// Skip the first line.
    pub has_header: bool,
    /// Class count; inferred as `max label + 1` when absent.
    pub num_classes: Option<usize>,
}

/// Read `label,f1,...,fD` rows.
pub fn load_csv_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    load_csv_dataset_with(path, &CsvOptions::default())
}

pub fn load_csv_dataset_with(path: impl AsRef<Path>, opts: &CsvOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let csv_err = |row: usize, message: String| Error::Csv {
        path: path.to_path_buf(),
        row,
        message,
    };
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(opts.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut dims = None;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let row = e.position().map_or(0, |p| p.line() as usize);
            csv_err(row, e.to_string())
        })?;
        let row = record
            .position()
            .map_or(labels.len() + 1, |p| p.line() as usize);
        if record.len() < 2 {
            return Err(csv_err(
                row,
                format!(
                    "expected a label and features, found {} field(s)",
                    record.len()
                ),
            ));
        }
        let expected = *dims.get_or_insert(record.len() - 1);
        if record.len() - 1 != expected {
            return Err(csv_err(
                row,
                format!("expected {expected} features, found {}", record.len() - 1),
            ));
        }
        let label: usize = record[0]
            .parse()
            .map_err(|_| csv_err(row, format!("label {:?} is not a class index", &record[0])))?;
        if let Some(classes) = opts.num_classes {
            if label >= classes {
                return Err(csv_err(
                    row,
                    format!("label {label} out of range for {classes} classes"),
                ));
            }
        }
        for (k, field) in record.iter().enumerate().skip(1) {
            let v: f64 = field.parse().map_err(|_| {
                csv_err(row, format!("field {} ({field:?}) is not a number", k + 1))
            })?;
            if !v.is_finite() {
                return Err(csv_err(row, format!("field {} is not finite", k + 1)));
            }
            features.push(v);
        }
        labels.push(label);
    }
    let Some(dims) = dims else {
        return Err(Error::NoRows {
            path: path.to_path_buf(),
        });
    };
    let num_classes = opts
        .num_classes
        .unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    Dataset::new(features, dims, labels, num_classes)
}

/// Write `label,f1,...,fD` rows using shortest round-trip float formatting.
pub fn write_csv_rows<'a>(
    path: impl AsRef<Path>,
    rows: impl IntoIterator<Item = (usize, &'a [f64])>,
) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for (label, feats) in rows {
        let mut line = label.to_string();
        for v in feats {
            line.push(',');
            line.push_str(&v.to_string());
        }
        line.push('\n');
        out.write_all(line.as_bytes()).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

pub fn write_csv_dataset(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_csv_rows(path, (0..data.len()).map(|i| (data.labels[i], data.row(i))))
}
