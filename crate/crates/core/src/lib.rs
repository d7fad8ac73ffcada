//! Debiasing of implicit-feedback evaluation data by stratified resampling.
//!
//! Rows are grouped into strata of a designated bias attribute and
//! resampled with per-stratum weights. The weights are chosen by Bayesian
//! optimization to minimize a held-out click-prediction loss plus a
//! neural estimate of the conditional mutual information between exposure
//! (or the bias attribute) and clicks given the relevant features.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod baselines;
pub mod click_model;
pub mod cmi;
pub mod data;
pub mod error;
pub mod experiment;
pub mod io;
pub mod metrics;
pub mod optimizer;
pub mod pipeline;
pub mod perturbation;
pub mod rng;
pub mod synthetic;

pub use data::{BiasKind, BiasValue, Dataset, InteractionRecord, Split};
pub use error::{Error, Result};
