//! Margin tables and the loss family: softmax cross entropy, its softplus
//! decomposition, LDAM and ELM.
//!
//! Every margin loss is available in two algebraic forms. The cross-entropy
//! form evaluates `-log softmax(u)_y` on adjusted logits `u`; the softplus
//! form evaluates `softplus(s(z_c* - z_y) + margin + rho)` where `c*` is the
//! strongest incorrect class and `rho` aggregates the remaining non-target
//! logits. Under [`ScaleConvention::AllLogits`] the two forms are the same
//! function and agree to rounding.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{check_finite, sigmoid, softplus_raw};
use crate::par::{map_indexed, Execution};

/// Per-class training-sample counts, at least two classes, each count ≥ 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct ClassCounts(Vec<usize>);

impl ClassCounts {
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        if counts.len() < 2 {
            return Err(invalid(format!(
                "need at least 2 classes, got {}",
                counts.len()
            )));
        }
        if let Some(j) = counts.iter().position(|&n| n == 0) {
            return Err(invalid(format!("class {j} has zero samples")));
        }
        Ok(ClassCounts(counts))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn min(&self) -> usize {
        *self.0.iter().min().expect("nonempty")
    }

    pub fn max(&self) -> usize {
        *self.0.iter().max().expect("nonempty")
    }
}

impl<'de> Deserialize<'de> for ClassCounts {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = Vec::<usize>::deserialize(d)?;
        ClassCounts::new(raw).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarginMode {
    /// `Δ_j = M / n_j^{1/4}`.
    Literal,
    /// `Δ_j = M (n_min / n_j)^{1/4}`; the rarest class gets exactly `M`.
    #[default]
    Normalized,
}

/// Per-class margins, larger for rarer classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginTable {
    deltas: Vec<f64>,
    mode: MarginMode,
    max_margin: f64,
}

impl MarginTable {
    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }

    pub fn mode(&self) -> MarginMode {
        self.mode
    }

    pub fn max_margin(&self) -> f64 {
        self.max_margin
    }

    pub fn num_classes(&self) -> usize {
        self.deltas.len()
    }

    /// All-zero table, for checking reductions to plain cross entropy.
    pub fn zeros(num_classes: usize) -> Self {
        MarginTable {
            deltas: vec![0.0; num_classes],
            mode: MarginMode::Literal,
            max_margin: 0.0,
        }
    }

    /// Table with explicit margins.
    pub fn from_deltas(deltas: Vec<f64>) -> Result<Self> {
        check_finite(&deltas)?;
        if deltas.iter().any(|&d| d < 0.0) {
            return Err(invalid("margins must be nonnegative"));
        }
        let max_margin = deltas.iter().copied().fold(0.0, f64::max);
        Ok(MarginTable {
            deltas,
            mode: MarginMode::Literal,
            max_margin,
        })
    }
}

fn fourth_root(x: f64) -> f64 {
    // exact for perfect fourth powers, unlike powf(0.25)
    x.sqrt().sqrt()
}

pub fn compute_margin_table(
    counts: &ClassCounts,
    max_margin: f64,
    mode: MarginMode,
) -> Result<MarginTable> {
    if !(max_margin > 0.0) || !max_margin.is_finite() {
        return Err(invalid(format!(
            "max margin must be positive, got {max_margin}"
        )));
    }
    let n_min = counts.min() as f64;
    let deltas = counts
        .as_slice()
        .iter()
        .map(|&n| match mode {
            MarginMode::Literal => max_margin / fourth_root(n as f64),
            MarginMode::Normalized => max_margin * fourth_root(n_min / n as f64),
        })
        .collect();
    Ok(MarginTable {
        deltas,
        mode,
        max_margin,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    #[default]
    Ce,
    Ldam,
    Elm,
}

impl std::fmt::Display for LossVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossVariant::Ce => "ce",
            LossVariant::Ldam => "ldam",
            LossVariant::Elm => "elm",
        })
    }
}

/// Where the scale factor `s` is applied in the cross-entropy form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleConvention {
    /// `u_k = s z_k` for every class; matches the softplus form exactly.
    #[default]
    AllLogits,
    /// Only the adjusted target logit is multiplied by `s`; non-target
    /// logits enter unscaled. Kept for measuring the mismatch.
    PrintedLiteral,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub variant: LossVariant,
    /// Logit scale `s`.
    pub scale: f64,
    /// Strength of the competitor margin (ELM only).
    pub lambda: f64,
    /// Subtract the target-class margin (ELM only). `false` gives the
    /// "without target margin" ablation.
    pub use_target_margin: bool,
    pub convention: ScaleConvention,
    pub margins: Option<MarginTable>,
}

pub const DEFAULT_MAX_MARGIN: f64 = 0.5;
pub const DEFAULT_SCALE: f64 = 30.0;
pub const DEFAULT_LAMBDA: f64 = 0.5;

impl LossConfig {
    pub fn ce() -> Self {
        LossConfig {
            variant: LossVariant::Ce,
            scale: 1.0,
            lambda: 0.0,
            use_target_margin: true,
            convention: ScaleConvention::AllLogits,
            margins: None,
        }
    }

    pub fn ldam(margins: MarginTable, scale: f64) -> Self {
        LossConfig {
            variant: LossVariant::Ldam,
            scale,
            margins: Some(margins),
            ..LossConfig::ce()
        }
    }

    pub fn elm(margins: MarginTable, scale: f64, lambda: f64) -> Self {
        LossConfig {
            variant: LossVariant::Elm,
            scale,
            lambda,
            margins: Some(margins),
            ..LossConfig::ce()
        }
    }

    pub fn with_target_margin(mut self, on: bool) -> Self {
        self.use_target_margin = on;
        self
    }

    pub fn with_convention(mut self, convention: ScaleConvention) -> Self {
        self.convention = convention;
        self
    }

    /// Check hyperparameters against a class count.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.variant == LossVariant::Ce {
            return Ok(());
        }
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(invalid(format!(
                "scale must be positive, got {}",
                self.scale
            )));
        }
        if self.variant == LossVariant::Elm && (!(self.lambda >= 0.0) || !self.lambda.is_finite()) {
            return Err(invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        match &self.margins {
            None => Err(invalid(format!("{} requires a margin table", self.variant))),
            Some(t) if t.num_classes() != num_classes => Err(Error::LengthMismatch {
                expected: num_classes,
                got: t.num_classes(),
            }),
            Some(_) => Ok(()),
        }
    }

    /// Loss in cross-entropy form for the configured variant.
    pub fn loss(&self, z: &[f64], y: usize) -> Result<LossOutput> {
        match self.variant {
            LossVariant::Ce => ce_loss(z, y),
            LossVariant::Ldam => ldam_loss(z, y, self),
            LossVariant::Elm => elm_loss(z, y, self),
        }
    }

    /// Loss in softplus form for the configured variant.
    pub fn loss_softplus(&self, z: &[f64], y: usize) -> Result<LossOutput> {
        match self.variant {
            LossVariant::Ce => lmsce_decompose(z, y),
            LossVariant::Ldam => ldam_softplus(z, y, self),
            LossVariant::Elm => elm_softplus(z, y, self),
        }
    }
}

/// Loss value, gradient with respect to the raw logits, and diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Strongest incorrect class (smallest index on ties).
    pub c_star: Option<usize>,
    /// `log Σ_{c≠y} exp(s (z_c - z_c*))`.
    pub rho_hat: f64,
    /// Margin added inside the softplus, in scaled units.
    pub target_margin: f64,
}

fn check_inputs(z: &[f64], y: usize, min_classes: usize) -> Result<()> {
    if z.len() < min_classes {
        return Err(invalid(format!(
            "need at least {min_classes} logits, got {}",
            z.len()
        )));
    }
    check_finite(z)?;
    if y >= z.len() {
        return Err(Error::LabelOutOfRange {
            label: y,
            classes: z.len(),
        });
    }
    Ok(())
}

/// Argmax over `c != y`, smallest index among ties.
pub fn strongest_competitor(z: &[f64], y: usize) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (c, &v) in z.iter().enumerate() {
        if c == y {
            continue;
        }
        match best {
            Some(b) if z[b] >= v => {}
            _ => best = Some(c),
        }
    }
    best
}

/// `log Σ_{c≠y} exp(s (z_c - z_c*))` and the normalized weights of the
/// non-target terms (zero at `y`).
fn rho_and_weights(z: &[f64], y: usize, c_star: usize, scale: f64) -> (f64, Vec<f64>) {
    let top = z[c_star];
    let mut w: Vec<f64> = z
        .iter()
        .enumerate()
        .map(|(c, &v)| {
            if c == y {
                0.0
            } else {
                (scale * (v - top)).exp()
            }
        })
        .collect();
    // the c* term is exactly 1; summing the rest separately keeps ln_1p accurate
    let rest: f64 = w
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != c_star)
        .map(|(_, &v)| v)
        .sum();
    let total = 1.0 + rest;
    w.iter_mut().for_each(|v| *v /= total);
    (rest.ln_1p(), w)
}

fn rho_hat(z: &[f64], y: usize, c_star: Option<usize>, scale: f64) -> f64 {
    c_star.map_or(0.0, |c| rho_and_weights(z, y, c, scale).0)
}

/// Cross entropy on adjusted logits: `u_y = s (z_y + shift)`, and
/// `u_k = s z_k` or `z_k` depending on the convention.
///
/// Evaluated as `log(1 + Σ_{k≠y} e^{u_k - u_y})` with a max shift, which
/// keeps relative accuracy when the loss is tiny.
fn shifted_cross_entropy(
    z: &[f64],
    y: usize,
    scale: f64,
    shift: f64,
    convention: ScaleConvention,
) -> (f64, Vec<f64>) {
    let other_scale = match convention {
        ScaleConvention::AllLogits => scale,
        ScaleConvention::PrintedLiteral => 1.0,
    };
    let u_y = scale * (z[y] + shift);
    let mut d: Vec<f64> = z
        .iter()
        .enumerate()
        .map(|(k, &v)| if k == y { 0.0 } else { other_scale * v - u_y })
        .collect();
    let m = d
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != y)
        .map(|(_, &v)| v)
        .fold(0.0, f64::max);
    let (loss, denom) = if m == 0.0 {
        let sum: f64 = d
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != y)
            .map(|(_, &v)| v.exp())
            .sum();
        (sum.ln_1p(), 1.0 + sum)
    } else {
        let sum: f64 = (-m).exp()
            + d.iter()
                .enumerate()
                .filter(|&(k, _)| k != y)
                .map(|(_, &v)| (v - m).exp())
                .sum::<f64>();
        (m + sum.ln(), sum)
    };
    // d becomes dL/du for k != y
    let mut grad_sum = 0.0;
    for (k, v) in d.iter_mut().enumerate() {
        if k == y {
            continue;
        }
        *v = (*v - m).exp() / denom;
        grad_sum += *v;
    }
    d[y] = -grad_sum;
    for (k, v) in d.iter_mut().enumerate() {
        *v *= if k == y { scale } else { other_scale };
    }
    (loss, d)
}

/// `softplus(s (z_c* - z_y) + margin + rho)` and its gradient.
fn softplus_form(z: &[f64], y: usize, scale: f64, margin: f64) -> LossOutput {
    let c_star = strongest_competitor(z, y).expect("at least two classes");
    let (rho, weights) = rho_and_weights(z, y, c_star, scale);
    let arg = scale * (z[c_star] - z[y]) + margin + rho;
    let slope = sigmoid(arg);
    let grad = weights
        .iter()
        .enumerate()
        .map(|(c, &w)| {
            if c == y {
                -scale * slope
            } else {
                scale * slope * w
            }
        })
        .collect();
    LossOutput {
        loss: softplus_raw(arg),
        grad,
        c_star: Some(c_star),
        rho_hat: rho,
        target_margin: margin,
    }
}

fn margins_of<'a>(cfg: &'a LossConfig, z: &[f64]) -> Result<&'a [f64]> {
    let table = cfg
        .margins
        .as_ref()
        .ok_or_else(|| invalid("margin loss requires a margin table"))?;
    if table.num_classes() != z.len() {
        return Err(Error::LengthMismatch {
            expected: z.len(),
            got: table.num_classes(),
        });
    }
    if !(cfg.scale > 0.0) || !cfg.scale.is_finite() {
        return Err(invalid(format!(
            "scale must be positive, got {}",
            cfg.scale
        )));
    }
    Ok(table.deltas())
}

/// Softmax cross entropy, `log(1 + Σ_{c≠y} e^{z_c - z_y})`.
pub fn ce_loss(z: &[f64], y: usize) -> Result<LossOutput> {
    check_inputs(z, y, 1)?;
    let (loss, grad) = shifted_cross_entropy(z, y, 1.0, 0.0, ScaleConvention::AllLogits);
    let c_star = strongest_competitor(z, y);
    Ok(LossOutput {
        loss,
        grad,
        c_star,
        rho_hat: rho_hat(z, y, c_star, 1.0),
        target_margin: 0.0,
    })
}

/// Cross entropy rewritten as `softplus(z_c* - z_y + rho)`.
pub fn lmsce_decompose(z: &[f64], y: usize) -> Result<LossOutput> {
    check_inputs(z, y, 2)?;
    Ok(softplus_form(z, y, 1.0, 0.0))
}

/// LDAM: cross entropy with the target logit lowered by `Δ_y`, then scaled.
pub fn ldam_loss(z: &[f64], y: usize, cfg: &LossConfig) -> Result<LossOutput> {
    check_inputs(z, y, 2)?;
    let deltas = margins_of(cfg, z)?;
    let (loss, grad) = shifted_cross_entropy(z, y, cfg.scale, -deltas[y], cfg.convention);
    let c_star = strongest_competitor(z, y);
    Ok(LossOutput {
        loss,
        grad,
        c_star,
        rho_hat: rho_hat(z, y, c_star, cfg.scale),
        target_margin: cfg.scale * deltas[y],
    })
}

/// LDAM in softplus form, `softplus(s(z_c* - z_y) + sΔ_y + rho)`.
pub fn ldam_softplus(z: &[f64], y: usize, cfg: &LossConfig) -> Result<LossOutput> {
    check_inputs(z, y, 2)?;
    let deltas = margins_of(cfg, z)?;
    Ok(softplus_form(z, y, cfg.scale, cfg.scale * deltas[y]))
}

fn elm_margin(cfg: &LossConfig, deltas: &[f64], y: usize, c_star: usize) -> Result<f64> {
    if !(cfg.lambda >= 0.0) || !cfg.lambda.is_finite() {
        return Err(invalid(format!("lambda must be >= 0, got {}", cfg.lambda)));
    }
    let target = if cfg.use_target_margin {
        deltas[y]
    } else {
        0.0
    };
    Ok(target - cfg.lambda * deltas[c_star])
}

/// ELM: the target logit becomes `z_y - Δ_y + λΔ_c*`, with `c*` the
/// strongest incorrect class. The selection of `c*` is held fixed when
/// differentiating.
pub fn elm_loss(z: &[f64], y: usize, cfg: &LossConfig) -> Result<LossOutput> {
    check_inputs(z, y, 2)?;
    let deltas = margins_of(cfg, z)?;
    let c_star = strongest_competitor(z, y).expect("at least two classes");
    let margin = elm_margin(cfg, deltas, y, c_star)?;
    let (loss, grad) = shifted_cross_entropy(z, y, cfg.scale, -margin, cfg.convention);
    Ok(LossOutput {
        loss,
        grad,
        c_star: Some(c_star),
        rho_hat: rho_hat(z, y, Some(c_star), cfg.scale),
        target_margin: cfg.scale * margin,
    })
}

/// ELM in softplus form, `softplus(s(z_c* - z_y) + sΔ_y - sλΔ_c* + rho)`.
pub fn elm_softplus(z: &[f64], y: usize, cfg: &LossConfig) -> Result<LossOutput> {
    check_inputs(z, y, 2)?;
    let deltas = margins_of(cfg, z)?;
    let c_star = strongest_competitor(z, y).expect("at least two classes");
    let margin = elm_margin(cfg, deltas, y, c_star)?;
    Ok(softplus_form(z, y, cfg.scale, cfg.scale * margin))
}

/// Weighted mean loss `Σ w_i L_i / Σ w_i`. Returned per-sample gradients are
/// already multiplied by `w_i / Σ w`.
pub fn batch_loss<Z>(
    zs: &[Z],
    ys: &[usize],
    weights: &[f64],
    cfg: &LossConfig,
    exec: Execution,
) -> Result<(f64, Vec<LossOutput>)>
where
    Z: AsRef<[f64]> + Sync,
{
    if zs.is_empty() {
        return Err(Error::Empty("batch"));
    }
    for len in [ys.len(), weights.len()] {
        if len != zs.len() {
            return Err(Error::LengthMismatch {
                expected: zs.len(),
                got: len,
            });
        }
    }
    check_finite(weights)?;
    if weights.iter().any(|&w| w < 0.0) {
        return Err(invalid("sample weights must be nonnegative"));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(invalid("sample weights are all zero"));
    }
    let outputs = map_indexed(exec, zs.len(), |i| cfg.loss(zs[i].as_ref(), ys[i]));
    let mut outputs = outputs.into_iter().collect::<Result<Vec<_>>>()?;
    let mut mean = 0.0;
    for (out, &w) in outputs.iter_mut().zip(weights) {
        let share = w / total;
        mean += share * out.loss;
        out.grad.iter_mut().for_each(|g| *g *= share);
    }
    Ok((mean, outputs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn counts(v: &[usize]) -> ClassCounts {
        ClassCounts::new(v.to_vec()).unwrap()
    }

    #[test]
    fn margin_table_examples() {
        let lit = compute_margin_table(&counts(&[16, 81]), 0.5, MarginMode::Literal).unwrap();
        assert!(close(lit.deltas()[0], 0.25, 1e-15));
        assert!(close(lit.deltas()[1], 0.5 / 3.0, 1e-15));
        let norm = compute_margin_table(&counts(&[16, 81]), 0.5, MarginMode::Normalized).unwrap();
        assert_eq!(norm.deltas()[0], 0.5);
        assert!(close(norm.deltas()[1], 1.0 / 3.0, 1e-15));
        let lt = compute_margin_table(&counts(&[5000, 50]), 0.5, MarginMode::Normalized).unwrap();
        assert!(close(lt.deltas()[0], 0.158113883008419, 1e-12));
        assert_eq!(lt.deltas()[1], 0.5);
    }

    #[test]
    fn margin_table_rejects_bad_input() {
        assert!(ClassCounts::new(vec![3, 0]).is_err());
        assert!(ClassCounts::new(vec![3]).is_err());
        assert!(compute_margin_table(&counts(&[3, 4]), 0.0, MarginMode::Literal).is_err());
        assert!(compute_margin_table(&counts(&[3, 4]), -1.0, MarginMode::Literal).is_err());
    }

    #[test]
    fn ce_examples() {
        let out = ce_loss(&[0.0; 10], 3).unwrap();
        assert!(close(out.loss, 10f64.ln(), 1e-14));
        assert!(close(
            ce_loss(&[1.0, 0.0], 0).unwrap().loss,
            0.313261687518223,
            1e-14
        ));
        let g = ce_loss(&[2.0, 1.0, 0.0], 0).unwrap().grad;
        for (got, want) in g.iter().zip([-0.3347590442, 0.2447284711, 0.0900305732]) {
            assert!(close(*got, want, 1e-9));
        }
        assert!(matches!(
            ce_loss(&[1.0, 2.0], 2),
            Err(Error::LabelOutOfRange { .. })
        ));
        assert!(ce_loss(&[1.0, f64::NAN], 0).is_err());
    }

    #[test]
    fn lmsce_examples() {
        let out = lmsce_decompose(&[2.0, 1.0, 0.0], 0).unwrap();
        assert_eq!(out.c_star, Some(1));
        assert!(close(out.rho_hat, 0.313261687518223, 1e-14));
        assert!(close(out.loss, 0.407605964444380, 1e-14));
        let out = lmsce_decompose(&[0.0, 5.0], 0).unwrap();
        assert_eq!(out.c_star, Some(1));
        assert_eq!(out.rho_hat, 0.0);
        assert!(close(out.loss, 5.006715348489118, 1e-14));
        for a in [-40.0, 0.0, 3.5, 900.0] {
            let out = lmsce_decompose(&[a, a, a], 0).unwrap();
            assert!(close(out.rho_hat, 2f64.ln(), 1e-14));
            assert!(close(out.loss, 3f64.ln(), 1e-14));
        }
        assert!(lmsce_decompose(&[1.0], 0).is_err());
    }

    #[test]
    fn competitor_ties_pick_smallest_index() {
        assert_eq!(strongest_competitor(&[0.0, 3.0, 3.0, 1.0], 0), Some(1));
        assert_eq!(strongest_competitor(&[5.0, 3.0, 3.0], 1), Some(0));
        assert_eq!(strongest_competitor(&[3.0, 3.0, 3.0], 0), Some(1));
        assert_eq!(strongest_competitor(&[3.0], 0), None);
    }

    fn two_class(d0: f64, d1: f64) -> MarginTable {
        MarginTable::from_deltas(vec![d0, d1]).unwrap()
    }

    #[test]
    fn ldam_examples() {
        let zero = LossConfig::ldam(MarginTable::zeros(4), 1.0);
        let z = [0.3, -1.2, 2.0, 0.7];
        assert_eq!(
            ldam_loss(&z, 2, &zero).unwrap().loss,
            ce_loss(&z, 2).unwrap().loss
        );
        let cfg = LossConfig::ldam(two_class(0.5, 0.0), 1.0);
        assert!(close(
            ldam_loss(&[0.0, 0.0], 0, &cfg).unwrap().loss,
            0.974076984180107,
            1e-14
        ));
        let sp = ldam_softplus(&[0.0, 0.0], 0, &cfg).unwrap();
        assert_eq!(sp.rho_hat, 0.0);
        assert!(close(sp.target_margin, 0.5, 1e-15));
        let cfg2 = LossConfig::ldam(two_class(0.5, 0.0), 2.0);
        assert!(close(
            ldam_loss(&[0.0, 0.0], 0, &cfg2).unwrap().loss,
            1.313261687518223,
            1e-14
        ));
        let sym = LossConfig::ldam(MarginTable::zeros(3), 1.0);
        let out = ldam_softplus(&[1.0, 1.0, 1.0], 0, &sym).unwrap();
        assert!(close(out.rho_hat, 2f64.ln(), 1e-14));
        assert!(close(out.loss, 3f64.ln(), 1e-14));
    }

    #[test]
    fn ldam_requires_margins() {
        let mut cfg = LossConfig::ldam(MarginTable::zeros(2), 1.0);
        cfg.margins = None;
        assert!(ldam_loss(&[0.0, 1.0], 0, &cfg).is_err());
        assert!(ldam_softplus(&[0.0, 1.0], 0, &cfg).is_err());
        let wrong = LossConfig::ldam(MarginTable::zeros(3), 1.0);
        assert!(ldam_loss(&[0.0, 1.0], 0, &wrong).is_err());
    }

    #[test]
    fn elm_examples() {
        let cfg = LossConfig::elm(two_class(0.4, 0.2), 1.0, 1.0);
        let out = elm_loss(&[0.0, 0.0], 0, &cfg).unwrap();
        assert!(close(out.loss, 0.798138869381592, 1e-14));
        assert!(close(out.target_margin, 0.2, 1e-15));
        assert!(close(out.grad[0], -0.549833997312478, 1e-12));
        assert!(close(out.grad[1], 0.549833997312478, 1e-12));

        let ablation = cfg.clone().with_target_margin(false);
        let out = elm_loss(&[0.0, 0.0], 0, &ablation).unwrap();
        assert!(close(out.loss, 0.598138869381592, 1e-14));
        let sp = elm_softplus(&[0.0, 0.0], 0, &ablation).unwrap();
        assert!(close(sp.loss, out.loss, 1e-12));

        let neg = LossConfig::elm(two_class(0.4, 0.2), 1.0, -0.1);
        assert!(elm_loss(&[0.0, 0.0], 0, &neg).is_err());
        assert!(elm_softplus(&[0.0, 0.0], 0, &neg).is_err());
    }

    #[test]
    fn elm_equal_margins_cancel() {
        let table = MarginTable::from_deltas(vec![0.3, 0.3, 0.3]).unwrap();
        let z = [0.4, -0.2, 0.9];
        for s in [1.0, 10.0] {
            let cfg = LossConfig::elm(table.clone(), s, 1.0);
            let scaled: Vec<f64> = z.iter().map(|v| v * s).collect();
            let want = lmsce_decompose(&scaled, 0).unwrap().loss;
            assert!(close(elm_softplus(&z, 0, &cfg).unwrap().loss, want, 1e-12));
            assert!(close(elm_loss(&z, 0, &cfg).unwrap().loss, want, 1e-12));
        }
    }

    #[test]
    fn batch_loss_examples() {
        let zs = vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![0.5, 0.5]];
        let ys = [0, 0, 1];
        let cfg = LossConfig::ce();
        let each: Vec<f64> = zs
            .iter()
            .zip(ys)
            .map(|(z, y)| ce_loss(z, y).unwrap().loss)
            .collect();
        let (mean, _) = batch_loss(&zs, &ys, &[1.0; 3], &cfg, Execution::Sequential).unwrap();
        assert!(close(mean, each.iter().sum::<f64>() / 3.0, 1e-15));
        let (one, outs) =
            batch_loss(&zs, &ys, &[0.0, 1.0, 0.0], &cfg, Execution::Sequential).unwrap();
        assert_eq!(one, each[1]);
        assert!(outs[0].grad.iter().all(|&g| g == 0.0));

        // z = [0, ln(e^L - 1)] has cross entropy exactly L at y = 0
        let l2 = (2f64.exp() - 1.0).ln();
        let l4 = (4f64.exp() - 1.0).ln();
        let zs = vec![vec![0.0, l2], vec![0.0, l4]];
        let (mean, _) = batch_loss(&zs, &[0, 0], &[1.0, 3.0], &cfg, Execution::Parallel).unwrap();
        assert!(close(mean, 3.5, 1e-12));

        assert!(batch_loss(&zs, &[0], &[1.0, 1.0], &cfg, Execution::Sequential).is_err());
        assert!(batch_loss(&zs, &[0, 0], &[0.0, 0.0], &cfg, Execution::Sequential).is_err());
        assert!(batch_loss(&zs, &[0, 0], &[1.0, -1.0], &cfg, Execution::Sequential).is_err());
    }

    #[test]
    fn printed_literal_differs_from_softplus_form() {
        let table = MarginTable::from_deltas(vec![0.5, 0.1, 0.2]).unwrap();
        let cfg = LossConfig::ldam(table, 10.0).with_convention(ScaleConvention::PrintedLiteral);
        let z = [0.2, 0.8, -0.4];
        let ce = ldam_loss(&z, 0, &cfg).unwrap().loss;
        let sp = ldam_softplus(&z, 0, &cfg).unwrap().loss;
        assert!((ce - sp).abs() > 1e-3);
    }

    fn arb_case() -> impl Strategy<Value = (Vec<f64>, usize, Vec<f64>, f64, f64)> {
        (2usize..12).prop_flat_map(|c| {
            (
                prop::collection::vec(-6.0f64..6.0, c),
                0..c,
                prop::collection::vec(0.0f64..0.5, c),
                prop::sample::select(vec![1.0, 10.0, 30.0]),
                prop::sample::select(vec![0.0, 0.1, 0.5, 1.0, 1.2]),
            )
        })
    }

    proptest! {
        #[test]
        fn forms_agree((z, y, d, s, lambda) in arb_case()) {
            let table = MarginTable::from_deltas(d).unwrap();
            let ldam = LossConfig::ldam(table.clone(), s);
            let elm = LossConfig::elm(table, s, lambda);
            prop_assert!((ldam_loss(&z, y, &ldam).unwrap().loss - ldam_softplus(&z, y, &ldam).unwrap().loss).abs() <= 1e-9);
            prop_assert!((elm_loss(&z, y, &elm).unwrap().loss - elm_softplus(&z, y, &elm).unwrap().loss).abs() <= 1e-9);
            prop_assert!((ce_loss(&z, y).unwrap().loss - lmsce_decompose(&z, y).unwrap().loss).abs() <= 1e-10);
        }

        #[test]
        fn gradients_sum_to_zero((z, y, d, s, lambda) in arb_case()) {
            let elm = LossConfig::elm(MarginTable::from_deltas(d).unwrap(), s, lambda);
            for out in [elm_loss(&z, y, &elm).unwrap(), elm_softplus(&z, y, &elm).unwrap(), ce_loss(&z, y).unwrap()] {
                prop_assert!(out.grad.iter().sum::<f64>().abs() <= 1e-10);
                prop_assert!(out.loss > 0.0);
            }
        }

        #[test]
        fn elm_loss_non_increasing_in_lambda((z, y, d, s, _l) in arb_case()) {
            let table = MarginTable::from_deltas(d).unwrap();
            let mut prev = f64::INFINITY;
            for lambda in [0.0, 0.1, 0.5, 1.0, 1.2, 2.0] {
                let loss = elm_loss(&z, y, &LossConfig::elm(table.clone(), s, lambda)).unwrap().loss;
                prop_assert!(loss <= prev);
                prev = loss;
            }
        }

        #[test]
        fn fewer_samples_larger_margin(mut n in prop::collection::vec(1usize..100_000, 2..20), m in 0.01f64..2.0) {
            n.dedup();
            prop_assume!(n.len() >= 2);
            let c = counts(&n);
            for mode in [MarginMode::Literal, MarginMode::Normalized] {
                let t = compute_margin_table(&c, m, mode).unwrap();
                for i in 0..n.len() {
                    for j in 0..n.len() {
                        if n[i] < n[j] {
                            prop_assert!(t.deltas()[i] > t.deltas()[j]);
                        }
                    }
                }
                if mode == MarginMode::Normalized {
                    let max = t.deltas().iter().copied().fold(0.0, f64::max);
                    prop_assert!((max - m).abs() <= 1e-12);
                }
            }
        }
    }
}
