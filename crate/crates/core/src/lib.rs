//! Dynamic structural equation models (DSEMs) compiled to augmented linear
//! Gaussian state space form, with exact marginal likelihoods via Kalman
//! filtering and gradient-based Bayesian estimation.
//!
//! The pipeline is: a declarative multilevel model ([`model::ModelSpec`]) is
//! realized at concrete parameter values, compiled per participant into an
//! augmented state space model ([`compile`]), filtered exactly ([`kalman`]),
//! and wrapped into a marginal log posterior with reverse-mode gradients
//! ([`posterior`]) that feeds the No-U-Turn sampler ([`samplers`]).
//! Convergence and efficiency summaries live in [`diagnostics`], synthetic
//! data generation in [`simgen`].

pub mod compile;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod kalman;
pub mod linalg;
pub mod math;
pub mod model;
pub mod oracle;
pub mod posterior;
pub mod runio;
pub mod samplers;
pub mod simgen;
pub mod tape;

pub use error::{Error, Result};
