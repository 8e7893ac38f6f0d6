//! Experiment configuration file for `elmlab train`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use elmlab::data::{
    load_csv_dataset_with, synth_gaussian_blobs, CsvOptions, Dataset, ImbalanceProfile, ProfileKind,
};

use elmlab::reweighting::ReweightConfig;
use elmlab::trainer::{LossSettings, ModelSettings};
use elmlab::{ClassCounts, RandomSource, TrainConfig};

/// Synthetic blob dataset drawn from an imbalance profile. Shared by
/// `gen-data` and the `synthetic` data source so both yield identical rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    pub kind: ProfileKind,
    pub classes: usize,
    pub n_max: usize,
    pub ratio: f64,
    #[serde(default = "default_dims")]
    pub dims: usize,
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default = "default_std")]
    pub std: f64,
    /// Balanced held-out draw; 0 means no test split.
    #[serde(default)]
    pub test_per_class: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSource {
    pub fn counts(&self) -> elmlab::Result<ClassCounts> {
        ImbalanceProfile {
            kind: self.kind,
            n_max: self.n_max,
            ratio: self.ratio,
            num_classes: self.classes,
        }
        .counts()
    }

    pub fn generate(&self) -> elmlab::Result<Prepared> {
        let counts = self.counts()?;
        let root = RandomSource::new(self.seed);
        let train = synth_gaussian_blobs(
            &counts,
            self.dims,
            self.separation,
            self.std,
            &mut root.child(1),
        )?;
        let test = if self.test_per_class > 0 {
            let balanced = ClassCounts::new(vec![self.test_per_class; self.classes])?;
            Some(synth_gaussian_blobs(
                &balanced,
                self.dims,
                self.separation,
                self.std,
                &mut root.child(2),
            )?)
        } else {
            None
        };
        Ok(Prepared { train, test })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataSection {
    Synthetic(SyntheticSource),
    Csv(CsvSource),
}

/// Paths are relative to the config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub train: PathBuf,
    #[serde(default)]
    pub test: Option<PathBuf>,
    #[serde(default)]
    pub has_header: bool,
    #[serde(default)]
    pub classes: Option<usize>,
}

fn default_dims() -> usize {
    2
}

fn default_separation() -> f64 {
    3.0
}

fn default_std() -> f64 {
    1.0
}

/// Optimizer and schedule fields; loss, reweighting and model live in their
/// own sections and seeds in `seeds`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub milestones: Vec<usize>,
    pub decay_factor: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            epochs: d.epochs,
            batch_size: d.batch_size,
            base_lr: d.base_lr,
            momentum: d.momentum,
            weight_decay: d.weight_decay,
            warmup_epochs: d.warmup_epochs,
            milestones: d.milestones,
            decay_factor: d.decay_factor,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    #[serde(default)]
    pub loss: LossSettings,
    #[serde(default)]
    pub reweight: Option<ReweightConfig>,
    #[serde(default)]
    pub model: ModelSettings,
    #[serde(default)]
    pub train: TrainSection,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
}

/// Datasets resolved from the data section.
#[derive(Debug)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Option<Dataset>,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            anyhow::anyhow!("config {path}: {}", e.into_inner())
        })?;
        Ok(cfg)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            base_lr: t.base_lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            warmup_epochs: t.warmup_epochs,
            milestones: t.milestones.clone(),
            decay_factor: t.decay_factor,
            seed,
            loss: self.loss.clone(),
            reweight: self.reweight,
            model: self.model.clone(),
            ..TrainConfig::default()
        }
    }

    /// Validate every section and materialize the datasets. Nothing is
    /// written to disk here.
    pub fn prepare(&self, base: &Path) -> anyhow::Result<Prepared> {
        if self.seeds.is_empty() {
            bail!("config seeds: at least one seed is required");
        }
        if self.output_dir.as_os_str().is_empty() {
            bail!("config output_dir: must not be empty");
        }
        self.train_config(0)
            .validate()
            .map_err(|e| anyhow::anyhow!("config {e}"))?;
        let prepared = match &self.data {
            DataSection::Synthetic(source) => source
                .generate()
                .map_err(|e| anyhow::anyhow!("config data: {e}"))?,
            DataSection::Csv(CsvSource {
                train,
                test,
                has_header,
                classes,
            }) => {
                let train_path = base.join(train);
                let mut opts = CsvOptions {
                    has_header: *has_header,
                    num_classes: *classes,
                };
                let train = load_csv_dataset_with(&train_path, &opts)
                    .map_err(|e| anyhow::anyhow!("config data.train: {e}"))?;
                opts.num_classes = Some(train.num_classes());
                let test = test
                    .as_ref()
                    .map(|p| load_csv_dataset_with(base.join(p), &opts))
                    .transpose()
                    .map_err(|e| anyhow::anyhow!("config data.test: {e}"))?;
                if let Some(t) = &test {
                    if t.dims() != train.dims() {
                        bail!(
                            "config data.test: {} features, train has {}",
                            t.dims(),
                            train.dims()
                        );
                    }
                }
                Prepared { train, test }
            }
        };
        let counts = prepared
            .train
            .class_counts()
            .map_err(|e| anyhow::anyhow!("config data: training set: {e}"))?;
        self.loss
            .build(&counts)
            .map_err(|e| anyhow::anyhow!("config loss: {e}"))?;
        Ok(prepared)
    }
}
