//! Accuracy metrics, confusion matrices and penultimate-feature export.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{write_csv_rows, Dataset};
use crate::error::{invalid, Error, Result};
use crate::model::ModelParams;
use crate::par::{map_indexed, Execution};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub k: usize,
    pub accuracy: f64,
}

/// Mean recall of frequent and rare classes. Classes whose training count
/// is at least the median count are frequent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub frequent_classes: Vec<usize>,
    pub rare_classes: Vec<usize>,
    pub frequent: Option<f64>,
    pub rare: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub samples: usize,
    pub top_k: Vec<TopK>,
    /// Mean of the defined per-class recalls.
    pub balanced_accuracy: Option<f64>,
    /// `None` for classes absent from the evaluation labels.
    pub per_class_recall: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub groups: Option<GroupAccuracy>,
}

impl EvalSummary {
    pub fn accuracy(&self, k: usize) -> Option<f64> {
        self.top_k.iter().find(|t| t.k == k).map(|t| t.accuracy)
    }
}

fn check_batch<Z: AsRef<[f64]>>(logits: &[Z], labels: &[usize]) -> Result<usize> {
    if logits.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if logits.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: logits.len(),
            got: labels.len(),
        });
    }
    let classes = logits[0].as_ref().len();
    for z in logits {
        if z.as_ref().len() != classes {
            return Err(Error::LengthMismatch {
                expected: classes,
                got: z.as_ref().len(),
            });
        }
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(classes)
}

/// Position of class `y` when classes are sorted by descending logit with
/// ties going to the smaller index.
fn rank_of(z: &[f64], y: usize) -> usize {
    z.iter()
        .enumerate()
        .filter(|&(c, &v)| v > z[y] || (v == z[y] && c < y))
        .count()
}

/// Index of the largest logit, smallest index on ties.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (c, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = c;
        }
    }
    best
}

/// Fraction of samples whose label ranks among the `k` largest logits.
pub fn topk_accuracy<Z: AsRef<[f64]>>(logits: &[Z], labels: &[usize], k: usize) -> Result<f64> {
    let classes = check_batch(logits, labels)?;
    if k == 0 || k > classes {
        return Err(invalid(format!("k must lie in 1..={classes}, got {k}")));
    }
    let hits = logits
        .iter()
        .zip(labels)
        .filter(|(z, &y)| rank_of(z.as_ref(), y) < k)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn confusion_matrix<Z: AsRef<[f64]>>(
    logits: &[Z],
    labels: &[usize],
) -> Result<Vec<Vec<usize>>> {
    let classes = check_batch(logits, labels)?;
    let mut m = vec![vec![0; classes]; classes];
    for (z, &y) in logits.iter().zip(labels) {
        m[y][argmax(z.as_ref())] += 1;
    }
    Ok(m)
}

fn recalls_from_confusion(m: &[Vec<usize>]) -> Vec<Option<f64>> {
    m.iter()
        .enumerate()
        .map(|(c, row)| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| row[c] as f64 / total as f64)
        })
        .collect()
}

pub fn per_class_recall<Z: AsRef<[f64]>>(
    logits: &[Z],
    labels: &[usize],
) -> Result<Vec<Option<f64>>> {
    Ok(recalls_from_confusion(&confusion_matrix(logits, labels)?))
}

fn mean_defined<'a>(values: impl IntoIterator<Item = &'a Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.into_iter().filter_map(|v| *v).collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Mean recall over the `m` classes with the fewest training samples
/// (larger index first among equal counts). Classes without evaluation
/// samples are skipped.
pub fn rarest_classes_recall(
    summary: &EvalSummary,
    train_counts: &[usize],
    m: usize,
) -> Option<f64> {
    let mut order: Vec<usize> = (0..train_counts.len()).collect();
    order.sort_by(|&a, &b| train_counts[a].cmp(&train_counts[b]).then(b.cmp(&a)));
    mean_defined(order.iter().take(m).map(|&c| &summary.per_class_recall[c]))
}

fn group_accuracy(recall: &[Option<f64>], train_counts: &[usize]) -> GroupAccuracy {
    let mut sorted = train_counts.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    };
    let (frequent_classes, rare_classes): (Vec<usize>, Vec<usize>) =
        (0..n).partition(|&c| train_counts[c] as f64 >= median);
    GroupAccuracy {
        frequent: mean_defined(frequent_classes.iter().map(|&c| &recall[c])),
        rare: mean_defined(rare_classes.iter().map(|&c| &recall[c])),
        frequent_classes,
        rare_classes,
    }
}

/// Full summary. `ks` larger than the class count are dropped; group
/// metrics need the training counts.
pub fn evaluate<Z: AsRef<[f64]>>(
    logits: &[Z],
    labels: &[usize],
    ks: &[usize],
    train_counts: Option<&[usize]>,
) -> Result<EvalSummary> {
    let classes = check_batch(logits, labels)?;
    let top_k = ks
        .iter()
        .filter(|&&k| k >= 1 && k <= classes)
        .map(|&k| {
            Ok(TopK {
                k,
                accuracy: topk_accuracy(logits, labels, k)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let confusion = confusion_matrix(logits, labels)?;
    let per_class_recall = recalls_from_confusion(&confusion);
    let groups = match train_counts {
        Some(tc) if tc.len() != classes => {
            return Err(Error::LengthMismatch {
                expected: classes,
                got: tc.len(),
            })
        }
        Some(tc) => Some(group_accuracy(&per_class_recall, tc)),
        None => None,
    };
    Ok(EvalSummary {
        samples: labels.len(),
        top_k,
        balanced_accuracy: mean_defined(&per_class_recall),
        per_class_recall,
        confusion,
        groups,
    })
}

pub const DEFAULT_TOP_K: [usize; 3] = [1, 3, 5];

/// Logits of every row in `data`.
pub fn model_logits(model: &ModelParams, data: &Dataset, exec: Execution) -> Result<Vec<Vec<f64>>> {
    if data.dims() != model.dims() {
        return Err(Error::LengthMismatch {
            expected: model.dims(),
            got: data.dims(),
        });
    }
    map_indexed(exec, data.len(), |i| {
        model.forward(data.row(i)).map(|z| z.into_inner())
    })
    .into_iter()
    .collect()
}

pub fn evaluate_model(
    model: &ModelParams,
    data: &Dataset,
    train_counts: Option<&[usize]>,
    exec: Execution,
) -> Result<EvalSummary> {
    let logits = model_logits(model, data, exec)?;
    evaluate(&logits, data.labels(), &DEFAULT_TOP_K, train_counts)
}

/// Write `label,f1,...,fF` rows of penultimate features.
pub fn dump_features(model: &ModelParams, data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let features = (0..data.len())
        .map(|i| model.penultimate(data.row(i)))
        .collect::<Result<Vec<_>>>()?;
    write_csv_rows(
        path,
        data.labels()
            .iter()
            .zip(&features)
            .map(|(&l, f)| (l, f.as_slice())),
    )
}
