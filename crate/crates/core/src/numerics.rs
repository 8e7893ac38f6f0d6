//! Stable scalar/vector primitives and the seeded random source.

use std::f64::consts::PI;
use std::ops::Deref;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};

/// Above this argument softplus returns `x`, below its negation `e^x`.
const SOFTPLUS_CUTOFF: f64 = 30.0;

/// A vector of finite reals.
#[derive(Debug, Clone, PartialEq, Default, serde::Serialize)]
#[serde(transparent)]
pub struct RealVector(Vec<f64>);

impl RealVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_finite(&values)?;
        Ok(RealVector(values))
    }

    pub(crate) fn from_finite(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()));
        RealVector(values)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for RealVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for RealVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        RealVector::new(values)
    }
}

pub(crate) fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

/// `log(1 + e^x)`, overflow-safe.
pub fn softplus(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::NonFinite { index: 0 });
    }
    Ok(softplus_raw(x))
}

#[inline]
pub(crate) fn softplus_raw(x: f64) -> f64 {
    if x > SOFTPLUS_CUTOFF {
        x
    } else if x < -SOFTPLUS_CUTOFF {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function, the derivative of softplus.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `max(v) + log Σ exp(v_i - max(v))`.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Empty("log_sum_exp input"));
    }
    check_finite(v)?;
    Ok(log_sum_exp_raw(v))
}

pub(crate) fn log_sum_exp_raw(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = v.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Softmax computed with a max shift.
pub fn stable_softmax(v: &[f64]) -> Result<RealVector> {
    if v.is_empty() {
        return Err(Error::Empty("softmax input"));
    }
    check_finite(v)?;
    Ok(RealVector::from_finite(softmax_raw(v)))
}

pub(crate) fn softmax_raw(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

/// `n` draws from N(mean, std²).
pub fn draw_normal(rng: &mut RandomSource, n: usize, mean: f64, std: f64) -> Result<RealVector> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(invalid(format!("std must be finite and >= 0, got {std}")));
    }
    if !mean.is_finite() {
        return Err(invalid("mean must be finite"));
    }
    let values = (0..n).map(|_| mean + std * rng.standard_normal()).collect();
    Ok(RealVector::from_finite(values))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// SplitMix64 finalizer; used to derive child seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded pseudo-random source.
///
/// The stream is ChaCha8 keyed with the seed's eight little-endian bytes
/// followed by 24 zero bytes (nonce/stream 0, block counter from 0). Derived
/// quantities use fixed recipes so other implementations can reproduce them:
///
/// * `uniform()` is `(next_u64() >> 11) * 2^-53`, in `[0, 1)`.
/// * `standard_normal()` is Box–Muller on two uniforms `u1, u2`:
///   `sqrt(-2 ln(1 - u1)) * cos(2π u2)`, with the matching `sin` value
///   returned by the next call.
/// * `below(n)` rejects raw words at or above the largest multiple of `n`.
/// * `child(tag)` seeds a new source with `mix64(seed ^ mix64(tag))`.
#[derive(Debug, Clone)]
pub struct RandomSource {
    seed: u64,
    rng: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        RandomSource {
            seed,
            rng: ChaCha8Rng::from_seed(key),
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent source for a sub-task, keyed by `tag`.
    pub fn child(&self, tag: u64) -> RandomSource {
        RandomSource::new(mix64(self.seed ^ mix64(tag)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        let theta = 2.0 * PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Fisher–Yates shuffle, swapping from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
