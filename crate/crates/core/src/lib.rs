//! Loss-function laboratory for class-imbalanced classification.
//!
//! Softmax cross entropy and its softplus decomposition, LDAM and ELM in
//! both algebraic forms with analytic logit gradients, margin tables,
//! effective-number reweighting with a deferred schedule, long-tailed and
//! step class profiles, and a deterministic SGD trainer for small linear or
//! one-hidden-layer classifiers.
//!
//! Per-sample work (batch losses, audits, evaluation) runs on rayon when the
//! `parallel` feature is enabled; see [`par::Execution`].

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audit;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod par;
pub mod reweighting;
pub mod trainer;

pub use data::{Dataset, ImbalanceProfile, ProfileKind};
pub use error::{Error, Result};
pub use eval::EvalSummary;
pub use losses::{
    ClassCounts, LossConfig, LossOutput, LossVariant, MarginMode, MarginTable, ScaleConvention,
};
pub use model::ModelParams;
pub use numerics::{RandomSource, RealVector};
pub use par::Execution;
pub use reweighting::ReweightConfig;
pub use trainer::{train_run, RunReport, TrainConfig};
