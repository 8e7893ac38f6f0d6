//! SGD with momentum and weight decay, and the warmup + step-decay schedule.

use crate::error::{invalid, Error, Result};
use crate::model::ModelParams;
use crate::trainer::TrainConfig;

/// Learning rate for `epoch`: a linear ramp reaching `base_lr` at epoch
/// `warmup_epochs - 1`, then `base_lr * decay^k` with `k` the number of
/// milestones at or before `epoch`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(invalid(format!(
            "epoch {epoch} out of range for {} epochs",
            cfg.epochs
        )));
    }
    if epoch < cfg.warmup_epochs {
        return Ok(cfg.base_lr * (epoch + 1) as f64 / cfg.warmup_epochs as f64);
    }
    let passed = cfg.milestones.iter().filter(|&&m| m <= epoch).count();
    Ok(cfg.base_lr * cfg.decay_factor.powi(passed as i32))
}

/// One momentum step on flat slices:
/// `v <- momentum * v + grad + weight_decay * p`, then `p <- p - lr * v`.
pub fn sgd_update(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for len in [grads.len(), velocity.len()] {
        if len != params.len() {
            return Err(Error::LengthMismatch {
                expected: params.len(),
                got: len,
            });
        }
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        if lr != 0.0 {
            *p -= lr * *v;
        }
    }
    Ok(())
}

/// [`sgd_update`] on a model, renormalizing cosine rows afterwards.
pub fn sgd_step(
    model: &mut ModelParams,
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    sgd_update(
        model.values_mut(),
        grads,
        velocity,
        lr,
        momentum,
        weight_decay,
    )?;
    if lr != 0.0 {
        model.renormalize();
    }
    Ok(())
}
