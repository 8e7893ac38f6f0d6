//! Randomized self-checks: agreement of the two algebraic loss forms and
//! finite-difference audits of the analytic gradients.
//!
//! Every trial draws from its own child stream of the suite seed, so results
//! do not depend on how trials are scheduled.

use serde::Serialize;

use crate::data::Dataset;
use crate::error::Result;
use crate::losses::{
    batch_loss, ce_loss, compute_margin_table, elm_loss, elm_softplus, ldam_loss, ldam_softplus,
    lmsce_decompose, strongest_competitor, ClassCounts, LossConfig, LossVariant, MarginMode,
    MarginTable, ScaleConvention, DEFAULT_MAX_MARGIN,
};
use crate::model::{init_model, ModelParams};
use crate::numerics::RandomSource;
use crate::par::{map_indexed, Execution};

pub const SCALES: [f64; 3] = [1.0, 10.0, 30.0];
pub const LAMBDAS: [f64; 5] = [0.0, 0.1, 0.5, 1.0, 1.2];
pub const LOGIT_STD: f64 = 3.0;
pub const MAX_CLASSES: usize = 100;
pub const FORM_TOLERANCE: f64 = 1e-9;
pub const DECOMPOSE_TOLERANCE: f64 = 1e-10;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const MODEL_GRADIENT_TOLERANCE: f64 = 1e-3;
/// Minimum gap between the two largest incorrect logits in audited inputs.
pub const MIN_COMPETITOR_GAP: f64 = 1e-3;

/// One random loss input.
#[derive(Debug, Clone)]
pub struct LossCase {
    pub logits: Vec<f64>,
    pub label: usize,
    pub margins: MarginTable,
    pub scale: f64,
    pub lambda: f64,
}

impl LossCase {
    /// `C` uniform in `2..=100`, logits N(0, 3²), margins from random counts
    /// in `1..=5000`, `s` and `λ` from the fixed grids.
    pub fn draw(rng: &mut RandomSource) -> LossCase {
        let classes = 2 + rng.below((MAX_CLASSES - 1) as u64) as usize;
        let logits = (0..classes)
            .map(|_| LOGIT_STD * rng.standard_normal())
            .collect();
        let label = rng.below(classes as u64) as usize;
        let counts = (0..classes).map(|_| 1 + rng.below(5000) as usize).collect();
        let counts = ClassCounts::new(counts).expect("counts are positive");
        let margins = compute_margin_table(&counts, DEFAULT_MAX_MARGIN, MarginMode::Normalized)
            .expect("valid margin");
        let scale = SCALES[rng.below(SCALES.len() as u64) as usize];
        let lambda = LAMBDAS[rng.below(LAMBDAS.len() as u64) as usize];
        LossCase {
            logits,
            label,
            margins,
            scale,
            lambda,
        }
    }

    /// Gap between the largest and second-largest incorrect logit.
    pub fn competitor_gap(&self) -> f64 {
        let mut others: Vec<f64> = self
            .logits
            .iter()
            .enumerate()
            .filter(|&(c, _)| c != self.label)
            .map(|(_, &v)| v)
            .collect();
        if others.len() < 2 {
            return f64::INFINITY;
        }
        others.sort_by(|a, b| b.total_cmp(a));
        others[0] - others[1]
    }

    pub fn config(&self, variant: LossVariant) -> LossConfig {
        match variant {
            LossVariant::Ce => LossConfig::ce(),
            LossVariant::Ldam => LossConfig::ldam(self.margins.clone(), self.scale),
            LossVariant::Elm => LossConfig::elm(self.margins.clone(), self.scale, self.lambda),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckRow {
    pub name: String,
    pub trials: usize,
    pub worst: f64,
    pub tolerance: f64,
    /// `false` when the row is informational only.
    pub enforced: bool,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        !self.enforced || self.worst <= self.tolerance
    }
}

#[derive(Debug, Clone)]
pub struct EquivalenceOptions {
    pub trials: usize,
    pub seed: u64,
    pub convention: ScaleConvention,
    pub execution: Execution,
}

impl Default for EquivalenceOptions {
    fn default() -> Self {
        EquivalenceOptions {
            trials: 100_000,
            seed: 0,
            convention: ScaleConvention::AllLogits,
            execution: Execution::default(),
        }
    }
}

/// Largest |cross-entropy form - softplus form| per variant. Under the
/// printed-literal convention the margin-loss rows only measure the mismatch.
pub fn check_equivalence(opts: &EquivalenceOptions) -> Result<Vec<CheckRow>> {
    let root = RandomSource::new(opts.seed);
    let diffs = map_indexed(opts.execution, opts.trials, |t| -> Result<[f64; 3]> {
        let case = LossCase::draw(&mut root.child(t as u64));
        let (z, y) = (&case.logits, case.label);
        let ldam = case
            .config(LossVariant::Ldam)
            .with_convention(opts.convention);
        let elm = case
            .config(LossVariant::Elm)
            .with_convention(opts.convention);
        Ok([
            (ce_loss(z, y)?.loss - lmsce_decompose(z, y)?.loss).abs(),
            (ldam_loss(z, y, &ldam)?.loss - ldam_softplus(z, y, &ldam)?.loss).abs(),
            (elm_loss(z, y, &elm)?.loss - elm_softplus(z, y, &elm)?.loss).abs(),
        ])
    });
    let mut worst = [0.0f64; 3];
    for d in diffs {
        let d = d?;
        for (w, v) in worst.iter_mut().zip(d) {
            *w = w.max(v);
        }
    }
    let enforced = opts.convention == ScaleConvention::AllLogits;
    Ok(vec![
        CheckRow {
            name: "ce-vs-lmsce".into(),
            trials: opts.trials,
            worst: worst[0],
            tolerance: DECOMPOSE_TOLERANCE,
            enforced: true,
        },
        CheckRow {
            name: "ldam".into(),
            trials: opts.trials,
            worst: worst[1],
            tolerance: FORM_TOLERANCE,
            enforced,
        },
        CheckRow {
            name: "elm".into(),
            trials: opts.trials,
            worst: worst[2],
            tolerance: FORM_TOLERANCE,
            enforced,
        },
    ])
}

/// `max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|)`; zero when both
/// vectors vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` around `x` with step `h`.
pub fn central_differences<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct GradientOptions {
    pub trials: usize,
    pub seed: u64,
    pub step: f64,
    pub variants: Vec<LossVariant>,
    /// Also audit backprop through small models.
    pub include_model: bool,
    pub execution: Execution,
}

impl Default for GradientOptions {
    fn default() -> Self {
        GradientOptions {
            trials: 10_000,
            seed: 0,
            step: 1e-5,
            variants: vec![LossVariant::Ce, LossVariant::Ldam, LossVariant::Elm],
            include_model: true,
            execution: Execution::default(),
        }
    }
}

/// Draw a case whose competitor selection is stable under perturbation.
pub fn draw_audit_case(rng: &mut RandomSource) -> LossCase {
    loop {
        let case = LossCase::draw(rng);
        if case.competitor_gap() > MIN_COMPETITOR_GAP {
            return case;
        }
    }
}

/// Worst relative error between analytic and finite-difference gradients
/// per requested variant, plus an end-to-end model row when enabled.
pub fn check_gradients(opts: &GradientOptions) -> Result<Vec<CheckRow>> {
    let root = RandomSource::new(opts.seed);
    let mut rows = Vec::new();
    for &variant in &opts.variants {
        let errors = map_indexed(opts.execution, opts.trials, |t| -> Result<f64> {
            let case = draw_audit_case(&mut root.child(t as u64));
            let cfg = case.config(variant);
            let analytic = cfg.loss(&case.logits, case.label)?.grad;
            let numeric = central_differences(
                |z| cfg.loss(z, case.label).map_or(f64::NAN, |o| o.loss),
                &case.logits,
                opts.step,
            );
            Ok(relative_error(&analytic, &numeric))
        });
        let mut worst = 0.0f64;
        for e in errors {
            let e = e?;
            worst = if e.is_nan() {
                f64::INFINITY
            } else {
                worst.max(e)
            };
        }
        rows.push(CheckRow {
            name: variant.to_string(),
            trials: opts.trials,
            worst,
            tolerance: GRADIENT_TOLERANCE,
            enforced: true,
        });
    }
    if opts.include_model {
        let (trials, worst) = check_model_gradients(opts.seed, opts.step)?;
        rows.push(CheckRow {
            name: "model".into(),
            trials,
            worst,
            tolerance: MODEL_GRADIENT_TOLERANCE,
            enforced: true,
        });
    }
    Ok(rows)
}

/// Weighted batch loss of `model` on `data`.
pub fn model_batch_loss(
    model: &ModelParams,
    data: &Dataset,
    weights: &[f64],
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    let acts = (0..data.len())
        .map(|i| model.forward_cached(data.row(i)))
        .collect::<Result<Vec<_>>>()?;
    let logits: Vec<&[f64]> = acts.iter().map(|a| a.logits.as_slice()).collect();
    let (loss, outs) = batch_loss(&logits, data.labels(), weights, cfg, Execution::Sequential)?;
    let mut grad = vec![0.0; model.num_params()];
    for (i, (act, out)) in acts.iter().zip(&outs).enumerate() {
        model.backward(data.row(i), act, &out.grad, &mut grad);
    }
    Ok((loss, grad))
}

/// Audit backprop on tiny linear/cosine/hidden models under every variant.
/// Returns the number of configurations checked and the worst error.
pub fn check_model_gradients(seed: u64, step: f64) -> Result<(usize, f64)> {
    let root = RandomSource::new(seed ^ 0x6d6f_6465_6c00);
    let (dims, classes, samples) = (3, 4, 6);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (k, (hidden, cosine)) in [
        (None, false),
        (None, true),
        (Some(5), false),
        (Some(5), true),
    ]
    .into_iter()
    .enumerate()
    {
        let mut rng = root.child(k as u64);
        let model = init_model(dims, classes, hidden, cosine, &mut rng)?;
        // resample until every sample's competitor choice is stable
        let (data, weights) = loop {
            let features: Vec<f64> = (0..samples * dims).map(|_| rng.standard_normal()).collect();
            let labels: Vec<usize> = (0..samples).map(|i| i % classes).collect();
            let data = Dataset::new(features, dims, labels, classes)?;
            let stable = (0..samples).all(|i| {
                let z = model.forward(data.row(i)).expect("dims match");
                let y = data.labels()[i];
                let c = strongest_competitor(&z, y).expect("classes >= 2");
                z.iter()
                    .enumerate()
                    .filter(|&(j, _)| j != y && j != c)
                    .all(|(_, &v)| z[c] - v > MIN_COMPETITOR_GAP)
            });
            if stable {
                let weights = (0..samples)
                    .map(|_| 0.5 + rng.uniform())
                    .collect::<Vec<_>>();
                break (data, weights);
            }
        };
        let margins = MarginTable::from_deltas(vec![0.1, 0.2, 0.35, 0.5])?;
        let scale = if cosine { 10.0 } else { 2.0 };
        for cfg in [
            LossConfig::ce(),
            LossConfig::ldam(margins.clone(), scale),
            LossConfig::elm(margins.clone(), scale, 0.5),
        ] {
            let (_, analytic) = model_batch_loss(&model, &data, &weights, &cfg)?;
            let numeric = central_differences(
                |p| {
                    let mut probe = model.clone();
                    probe.values_mut().copy_from_slice(p);
                    model_batch_loss(&probe, &data, &weights, &cfg).map_or(f64::NAN, |r| r.0)
                },
                model.values(),
                step,
            );
            let e = relative_error(&analytic, &numeric);
            worst = if e.is_nan() {
                f64::INFINITY
            } else {
                worst.max(e)
            };
            checked += 1;
        }
    }
    Ok((checked, worst))
}
