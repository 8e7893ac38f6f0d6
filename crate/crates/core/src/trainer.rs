//! Deterministic mini-batch training with per-epoch reporting.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::eval::{argmax, evaluate_model, EvalSummary};
use crate::losses::{
    batch_loss, compute_margin_table, ClassCounts, LossConfig, LossVariant, MarginMode,
    ScaleConvention, DEFAULT_LAMBDA, DEFAULT_MAX_MARGIN, DEFAULT_SCALE,
};
use crate::model::{init_model, ModelParams};
use crate::numerics::RandomSource;
use crate::optim::{lr_at, sgd_step};
use crate::par::{map_indexed, Execution};
use crate::reweighting::{drw_sample_weights, phase_at, ReweightConfig, WeightPhase};

/// Child-stream tag for parameter initialization; epoch `e` shuffles with
/// tag `e + 1`.
const INIT_TAG: u64 = 0;

/// Loss hyperparameters; the margin table is built from the training counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSettings {
    pub variant: LossVariant,
    pub scale: f64,
    pub lambda: f64,
    pub max_margin: f64,
    pub margin_mode: MarginMode,
    pub use_target_margin: bool,
    pub convention: ScaleConvention,
}

impl Default for LossSettings {
    fn default() -> Self {
        LossSettings {
            variant: LossVariant::Ce,
            scale: DEFAULT_SCALE,
            lambda: DEFAULT_LAMBDA,
            max_margin: DEFAULT_MAX_MARGIN,
            margin_mode: MarginMode::Normalized,
            use_target_margin: true,
            convention: ScaleConvention::AllLogits,
        }
    }
}

impl LossSettings {
    pub fn build(&self, counts: &ClassCounts) -> Result<LossConfig> {
        let cfg = match self.variant {
            LossVariant::Ce => LossConfig::ce(),
            variant => {
                let margins = compute_margin_table(counts, self.max_margin, self.margin_mode)?;
                LossConfig {
                    variant,
                    scale: self.scale,
                    lambda: self.lambda,
                    use_target_margin: self.use_target_margin,
                    convention: self.convention,
                    margins: Some(margins),
                }
            }
        };
        cfg.validate(counts.num_classes())?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    /// Width of the softplus hidden layer; `None` for a linear model.
    pub hidden: Option<usize>,
    /// Cosine logits. Defaults to on for margin losses, off for CE.
    pub cosine: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub milestones: Vec<usize>,
    pub decay_factor: f64,
    pub seed: u64,
    pub loss: LossSettings,
    /// Deferred class-balanced weighting; `None` trains unweighted.
    pub reweight: Option<ReweightConfig>,
    pub model: ModelSettings,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 128,
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 2e-4,
            warmup_epochs: 5,
            milestones: vec![160, 180],
            decay_factor: 0.01,
            seed: 0,
            loss: LossSettings::default(),
            reweight: None,
            model: ModelSettings::default(),
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    /// The default recipe shrunk to `epochs`: milestones at 80% and 90% of
    /// the run.
    pub fn scaled(epochs: usize) -> Self {
        let at = |frac: f64| (epochs as f64 * frac).round() as usize;
        TrainConfig {
            epochs,
            milestones: if epochs >= 10 {
                vec![at(0.8), at(0.9)]
            } else {
                Vec::new()
            },
            warmup_epochs: 5.min(epochs),
            ..TrainConfig::default()
        }
    }

    /// Enable deferred re-weighting starting at the first milestone.
    pub fn with_drw(mut self, beta: f64) -> Self {
        let defer_epoch = self.milestones.first().copied().unwrap_or(0);
        self.reweight = Some(ReweightConfig { beta, defer_epoch });
        self
    }

    pub fn cosine(&self) -> bool {
        self.model
            .cosine
            .unwrap_or(self.loss.variant != LossVariant::Ce)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("train.batch_size must be at least 1"));
        }
        if !(self.base_lr >= 0.0) || !self.base_lr.is_finite() {
            return Err(invalid("train.base_lr must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("train.momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(invalid("train.weight_decay must be finite and >= 0"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(invalid("train.decay_factor must lie in (0, 1)"));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("train.milestones must be strictly increasing"));
        }
        if self.milestones.last().is_some_and(|&m| m >= self.epochs) {
            return Err(invalid("train.milestones must be below train.epochs"));
        }
        if let Some(rw) = &self.reweight {
            rw.validate()
                .map_err(|e| invalid(format!("reweight: {e}")))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    /// Running training accuracy per class, measured before each update.
    pub train_accuracy: Vec<Option<f64>>,
    pub phase: WeightPhase,
    pub warmup: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub train_counts: Vec<usize>,
    pub epochs: Vec<EpochRecord>,
    /// Evaluation of the final model on the training set.
    pub final_summary: EvalSummary,
}

/// Training state that persists across epochs.
pub struct Trainer<'a> {
    cfg: &'a TrainConfig,
    loss: LossConfig,
    counts: ClassCounts,
    velocity: Vec<f64>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a TrainConfig, data: &Dataset, model: &ModelParams) -> Result<Self> {
        cfg.validate()?;
        let counts = data.class_counts()?;
        let loss = cfg.loss.build(&counts)?;
        Ok(Trainer {
            cfg,
            loss,
            counts,
            velocity: vec![0.0; model.num_params()],
        })
    }

    pub fn loss_config(&self) -> &LossConfig {
        &self.loss
    }

    /// One pass over a seeded permutation of `data`.
    pub fn train_epoch(
        &mut self,
        model: &mut ModelParams,
        data: &Dataset,
        epoch: usize,
    ) -> Result<EpochRecord> {
        let cfg = self.cfg;
        let exec = cfg.execution;
        let lr = lr_at(epoch, cfg)?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        RandomSource::new(cfg.seed)
            .child(epoch as u64 + 1)
            .shuffle(&mut order);

        let classes = data.num_classes();
        let mut seen = vec![0usize; classes];
        let mut correct = vec![0usize; classes];
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let acts = map_indexed(exec, batch.len(), |j| {
                model.forward_cached(data.row(batch[j]))
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels()[i]).collect();
            let weights = match &cfg.reweight {
                Some(rw) => drw_sample_weights(epoch, &labels, rw, &self.counts)?,
                None => vec![1.0; batch.len()],
            };
            let logits: Vec<&[f64]> = acts.iter().map(|a| a.logits.as_slice()).collect();
            let (mean, outs) = batch_loss(&logits, &labels, &weights, &self.loss, exec)?;
            loss_sum += mean * batch.len() as f64;
            for (z, &y) in logits.iter().zip(&labels) {
                seen[y] += 1;
                if argmax(z) == y {
                    correct[y] += 1;
                }
            }

            let per_sample = map_indexed(exec, batch.len(), |j| {
                let mut g = vec![0.0; model.num_params()];
                model.backward(data.row(batch[j]), &acts[j], &outs[j].grad, &mut g);
                g
            });
            let mut grad = vec![0.0; model.num_params()];
            for g in &per_sample {
                grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            sgd_step(
                model,
                &grad,
                &mut self.velocity,
                lr,
                cfg.momentum,
                cfg.weight_decay,
            )?;
        }

        Ok(EpochRecord {
            epoch,
            lr,
            mean_loss: if data.is_empty() {
                0.0
            } else {
                loss_sum / data.len() as f64
            },
            train_accuracy: seen
                .iter()
                .zip(&correct)
                .map(|(&n, &k)| (n > 0).then(|| k as f64 / n as f64))
                .collect(),
            phase: cfg
                .reweight
                .as_ref()
                .map_or(WeightPhase::Uniform, |rw| phase_at(epoch, rw)),
            warmup: epoch < cfg.warmup_epochs,
        })
    }
}

/// Model initialized from the run seed.
pub fn initial_model(data: &Dataset, cfg: &TrainConfig) -> Result<ModelParams> {
    init_model(
        data.dims(),
        data.num_classes(),
        cfg.model.hidden,
        cfg.cosine(),
        &mut RandomSource::new(cfg.seed).child(INIT_TAG),
    )
}

/// Train for `cfg.epochs` epochs and report every epoch.
pub fn train_run(data: &Dataset, cfg: &TrainConfig) -> Result<(ModelParams, RunReport)> {
    let mut model = initial_model(data, cfg)?;
    let mut trainer = Trainer::new(cfg, data, &model)?;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        epochs.push(trainer.train_epoch(&mut model, data, epoch)?);
    }
    let train_counts = data.counts();
    let final_summary = evaluate_model(&model, data, Some(&train_counts), cfg.execution)?;
    Ok((
        model,
        RunReport {
            seed: cfg.seed,
            train_counts,
            epochs,
            final_summary,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_gaussian_blobs;

    fn blobs(per_class: usize, separation: f64, seed: u64) -> Dataset {
        let counts = ClassCounts::new(vec![per_class; 4]).unwrap();
        synth_gaussian_blobs(&counts, 2, separation, 1.0, &mut RandomSource::new(seed)).unwrap()
    }

    #[test]
    fn zero_lr_leaves_model_unchanged() {
        let data = blobs(20, 3.0, 1);
        let cfg = TrainConfig {
            base_lr: 0.0,
            ..TrainConfig::scaled(3)
        };
        let mut model = initial_model(&data, &cfg).unwrap();
        let before = model.clone();
        let mut trainer = Trainer::new(&cfg, &data, &model).unwrap();
        let rec = trainer.train_epoch(&mut model, &data, 0).unwrap();
        assert_eq!(model, before);
        assert!(rec.mean_loss > 0.0);
    }

    #[test]
    fn epochs_are_deterministic() {
        let data = blobs(30, 3.0, 2);
        let mut cfg = TrainConfig::scaled(4).with_drw(0.999);
        cfg.loss.variant = LossVariant::Elm;
        cfg.batch_size = 16;
        let run = |exec| {
            let cfg = TrainConfig {
                execution: exec,
                ..cfg.clone()
            };
            train_run(&data, &cfg).unwrap()
        };
        let (m1, r1) = run(Execution::Parallel);
        let (m2, r2) = run(Execution::Parallel);
        let (m3, r3) = run(Execution::Sequential);
        assert_eq!(m1, m2);
        assert_eq!(r1, r2);
        assert_eq!(m1, m3);
        assert_eq!(r1, r3);
        assert_eq!(r1.epochs.len(), 4);
        for rec in &r1.epochs {
            assert_eq!(rec.lr, lr_at(rec.epoch, &cfg).unwrap());
        }
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let data = blobs(10, 3.0, 3);
        let cfg = TrainConfig::scaled(0);
        let (model, report) = train_run(&data, &cfg).unwrap();
        assert_eq!(model, initial_model(&data, &cfg).unwrap());
        assert!(report.epochs.is_empty());
        assert_eq!(report.final_summary.samples, data.len());
    }

    #[test]
    fn ce_learns_separated_blobs() {
        let data = blobs(100, 6.0, 4);
        let cfg = TrainConfig {
            batch_size: 32,
            ..TrainConfig::scaled(20)
        };
        let (_, report) = train_run(&data, &cfg).unwrap();
        let acc = report.final_summary.accuracy(1).unwrap();
        assert!(acc >= 0.95, "train accuracy {acc}");
    }

    #[test]
    fn config_validation() {
        let bad = [
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::scaled(10)
            },
            TrainConfig {
                milestones: vec![5, 5],
                ..TrainConfig::scaled(10)
            },
            TrainConfig {
                milestones: vec![10],
                ..TrainConfig::scaled(10)
            },
            TrainConfig {
                decay_factor: 1.0,
                ..TrainConfig::scaled(10)
            },
            TrainConfig {
                momentum: 1.0,
                ..TrainConfig::scaled(10)
            },
            TrainConfig::scaled(10).with_drw(1.0),
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
        assert!(TrainConfig::scaled(60).validate().is_ok());
        assert_eq!(TrainConfig::scaled(60).milestones, vec![48, 54]);
        assert_eq!(TrainConfig::scaled(200).milestones, vec![160, 180]);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let ok: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "milestones": []}"#).unwrap();
        assert_eq!(ok.epochs, 3);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"loss": {"lamda": 1}}"#).is_err());
    }
}
