//! Linear or one-hidden-layer classifier with optional cosine logits.
//!
//! All parameters live in one flat vector so the optimizer and gradient
//! audits can treat them uniformly. Layout, in order: hidden weights
//! (`H x D`, row-major) and hidden bias (`H`) when a hidden layer exists,
//! classifier weights (`C x F`), classifier bias (`C`) in linear mode only.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{check_finite, dot, norm, sigmoid, softplus_raw, RandomSource, RealVector};

/// Norms below this are treated as zero by the cosine head.
const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    dims: usize,
    hidden: Option<usize>,
    classes: usize,
    cosine: bool,
    values: Vec<f64>,
}

/// Intermediate values of one forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct Activations {
    pre_hidden: Vec<f64>,
    pub features: Vec<f64>,
    pub logits: Vec<f64>,
    feature_norm: f64,
    row_norms: Vec<f64>,
}

pub fn init_model(
    dims: usize,
    classes: usize,
    hidden: Option<usize>,
    cosine: bool,
    rng: &mut RandomSource,
) -> Result<ModelParams> {
    if dims == 0 || classes == 0 {
        return Err(invalid(format!(
            "model dims must be positive, got D={dims}, C={classes}"
        )));
    }
    let hidden = hidden.filter(|&h| h > 0);
    let mut model = ModelParams {
        dims,
        hidden,
        classes,
        cosine,
        values: Vec::new(),
    };
    model.values = vec![0.0; model.num_params()];
    if let Some(h) = hidden {
        let std = 1.0 / (dims as f64).sqrt();
        for v in &mut model.values[..h * dims] {
            *v = std * rng.standard_normal();
        }
    }
    let f = model.feature_dims();
    let std = 1.0 / (f as f64).sqrt();
    let start = model.classifier_offset();
    for v in &mut model.values[start..start + classes * f] {
        *v = std * rng.standard_normal();
    }
    model.renormalize();
    Ok(model)
}

impl ModelParams {
    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn hidden(&self) -> Option<usize> {
        self.hidden
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn is_cosine(&self) -> bool {
        self.cosine
    }

    /// Width of the penultimate representation.
    pub fn feature_dims(&self) -> usize {
        self.hidden.unwrap_or(self.dims)
    }

    /// Structural check for parameters loaded from disk.
    pub fn validate(&self) -> Result<()> {
        if self.dims == 0 || self.classes == 0 {
            return Err(invalid("model dims must be positive"));
        }
        if self.values.len() != self.num_params() {
            return Err(Error::LengthMismatch {
                expected: self.num_params(),
                got: self.values.len(),
            });
        }
        check_finite(&self.values)
    }

    pub fn num_params(&self) -> usize {
        let hidden = self.hidden.map_or(0, |h| h * self.dims + h);
        let bias = if self.cosine { 0 } else { self.classes };
        hidden + self.classes * self.feature_dims() + bias
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    fn classifier_offset(&self) -> usize {
        self.hidden.map_or(0, |h| h * self.dims + h)
    }

    /// Rows of the classifier weight matrix.
    pub fn classifier_row(&self, c: usize) -> &[f64] {
        let f = self.feature_dims();
        let start = self.classifier_offset() + c * f;
        &self.values[start..start + f]
    }

    pub fn classifier_bias(&self) -> Option<&[f64]> {
        if self.cosine {
            return None;
        }
        let start = self.classifier_offset() + self.classes * self.feature_dims();
        Some(&self.values[start..start + self.classes])
    }

    /// Scale every classifier row to unit length (cosine mode only).
    pub fn renormalize(&mut self) {
        if !self.cosine {
            return;
        }
        let f = self.feature_dims();
        let start = self.classifier_offset();
        for row in self.values[start..start + self.classes * f].chunks_mut(f) {
            let n = norm(row);
            if n > NORM_FLOOR {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dims {
            return Err(Error::LengthMismatch {
                expected: self.dims,
                got: x.len(),
            });
        }
        check_finite(x)
    }

    /// Penultimate representation: the input itself for linear models,
    /// softplus hidden activations otherwise.
    pub fn penultimate(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.activate(x).features)
    }

    /// Logits. In cosine mode these are cosine similarities in `[-1, 1]`;
    /// the loss applies any scale.
    pub fn forward(&self, x: &[f64]) -> Result<RealVector> {
        self.check_input(x)?;
        RealVector::new(self.activate(x).logits)
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<Activations> {
        self.check_input(x)?;
        Ok(self.activate(x))
    }

    fn activate(&self, x: &[f64]) -> Activations {
        let (pre_hidden, features) = match self.hidden {
            Some(h) => {
                let w = &self.values[..h * self.dims];
                let b = &self.values[h * self.dims..h * self.dims + h];
                let pre: Vec<f64> = w
                    .chunks(self.dims)
                    .zip(b)
                    .map(|(row, bias)| dot(row, x) + bias)
                    .collect();
                let act = pre.iter().map(|&p| softplus_raw(p)).collect();
                (pre, act)
            }
            None => (Vec::new(), x.to_vec()),
        };
        let f = self.feature_dims();
        let start = self.classifier_offset();
        let weights = &self.values[start..start + self.classes * f];
        if self.cosine {
            let feature_norm = norm(&features);
            let row_norms: Vec<f64> = weights.chunks(f).map(norm).collect();
            let logits = weights
                .chunks(f)
                .zip(&row_norms)
                .map(|(row, &rn)| {
                    if rn <= NORM_FLOOR || feature_norm <= NORM_FLOOR {
                        0.0
                    } else {
                        (dot(row, &features) / (rn * feature_norm)).clamp(-1.0, 1.0)
                    }
                })
                .collect();
            Activations {
                pre_hidden,
                features,
                logits,
                feature_norm,
                row_norms,
            }
        } else {
            let bias = &self.values[start + self.classes * f..];
            let logits = weights
                .chunks(f)
                .zip(bias)
                .map(|(row, b)| dot(row, &features) + b)
                .collect();
            Activations {
                pre_hidden,
                features,
                logits,
                feature_norm: 0.0,
                row_norms: Vec::new(),
            }
        }
    }

    /// Accumulate `d loss / d params` into `grad` given `d loss / d logits`.
    pub fn backward(&self, x: &[f64], act: &Activations, dlogits: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.values.len());
        let f = self.feature_dims();
        let start = self.classifier_offset();
        let weights = &self.values[start..start + self.classes * f];
        let mut dfeat = vec![0.0; f];
        {
            let (_, gw) = grad.split_at_mut(start);
            if self.cosine {
                let fnorm = act.feature_norm;
                for c in 0..self.classes {
                    let rn = act.row_norms[c];
                    if rn <= NORM_FLOOR || fnorm <= NORM_FLOOR || dlogits[c] == 0.0 {
                        continue;
                    }
                    let z = act.logits[c];
                    let row = &weights[c * f..(c + 1) * f];
                    let g = dlogits[c];
                    for k in 0..f {
                        gw[c * f + k] +=
                            g * (act.features[k] / (rn * fnorm) - z * row[k] / (rn * rn));
                        dfeat[k] +=
                            g * (row[k] / (rn * fnorm) - z * act.features[k] / (fnorm * fnorm));
                    }
                }
            } else {
                for c in 0..self.classes {
                    let g = dlogits[c];
                    let row = &weights[c * f..(c + 1) * f];
                    for k in 0..f {
                        gw[c * f + k] += g * act.features[k];
                        dfeat[k] += g * row[k];
                    }
                    gw[self.classes * f + c] += g;
                }
            }
        }
        if let Some(h) = self.hidden {
            for j in 0..h {
                let dpre = dfeat[j] * sigmoid(act.pre_hidden[j]);
                for (k, &xk) in x.iter().enumerate() {
                    grad[j * self.dims + k] += dpre * xk;
                }
                grad[h * self.dims + j] += dpre;
            }
        }
    }
}
