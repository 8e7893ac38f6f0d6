//! Class-balanced weights and the deferred re-weighting schedule.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::losses::ClassCounts;

pub const DEFAULT_BETA: f64 = 0.9999;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReweightConfig {
    pub beta: f64,
    /// First epoch that uses class-balanced weights.
    pub defer_epoch: usize,
}

impl ReweightConfig {
    pub fn validate(&self) -> Result<()> {
        check_beta(self.beta)
    }
}

/// Which weighting the schedule applies in a given epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightPhase {
    Uniform,
    ClassBalanced,
}

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&beta) {
        return Err(invalid(format!("beta must lie in [0, 1), got {beta}")));
    }
    Ok(())
}

/// Effective-number weights `(1 - β) / (1 - β^n_c)`, rescaled to mean one.
pub fn effective_number_weights(counts: &ClassCounts, beta: f64) -> Result<Vec<f64>> {
    check_beta(beta)?;
    let raw: Vec<f64> = counts
        .as_slice()
        .iter()
        .map(|&n| {
            if beta == 0.0 {
                1.0
            } else {
                // 1 - β^n without cancellation
                let effective = -(n as f64 * beta.ln()).exp_m1();
                (1.0 - beta) / effective
            }
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(raw.into_iter().map(|w| w / mean).collect())
}

pub fn phase_at(epoch: usize, cfg: &ReweightConfig) -> WeightPhase {
    if epoch < cfg.defer_epoch {
        WeightPhase::Uniform
    } else {
        WeightPhase::ClassBalanced
    }
}

/// Per-sample weights for one batch under the deferred schedule.
pub fn drw_sample_weights(
    epoch: usize,
    labels: &[usize],
    cfg: &ReweightConfig,
    counts: &ClassCounts,
) -> Result<Vec<f64>> {
    let classes = counts.num_classes();
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    match phase_at(epoch, cfg) {
        WeightPhase::Uniform => {
            check_beta(cfg.beta)?;
            Ok(vec![1.0; labels.len()])
        }
        WeightPhase::ClassBalanced => {
            let table = effective_number_weights(counts, cfg.beta)?;
            Ok(labels.iter().map(|&l| table[l]).collect())
        }
    }
}
