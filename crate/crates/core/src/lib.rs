//! Bayesian multimorbidity mapping: a multivariate logistic model whose
//! coefficients vary smoothly over locations and birth cohorts.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod coefficients;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod evaluation;
pub mod kernels;
pub mod linalg;
pub mod model;
pub mod params;
pub mod priors;
pub mod sampler;
pub mod simulator;
pub mod summaries;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::PosteriorTarget;
