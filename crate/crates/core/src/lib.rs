//! Deep-network estimation and subsample-ensemble inference for the
//! nonparametric Cox proportional hazards model.
//!
//! The log-risk `g` in `λ(t | x) = λ0(t) exp{g(x)}` is estimated by ReLU
//! networks trained on the Cox partial likelihood. Averaging networks fit to
//! `B` random size-`r` subsamples gives an ensemble estimate whose variance
//! is estimated by a bias-corrected infinitesimal jackknife, yielding Wald
//! intervals for `g(x)` and for log-hazard-ratio contrasts `g(x1) - g(x2)`.

pub mod baselines;
pub mod cli;
pub mod coxloss;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod net;
pub mod seed;
pub mod study;
pub mod trainer;

pub use error::{Error, Result};
