//! Semiparametric estimation of a single-index conditional density model for a
//! randomly right-censored response.
//!
//! The pipeline weights observations by the jumps of the Kaplan-Meier
//! estimator, estimates the conditional density of the response given the
//! index `θ'X` with a fourth-order kernel, and maximizes a trimmed, truncated
//! pseudo-log-likelihood. The bandwidth is chosen by cross-validation and the
//! truncation point by minimizing an estimated asymptotic mean squared error.
//!
//! Module map:
//! - [`survival`]: product-limit estimators, Kaplan-Meier integrals and the
//!   influence function with its censoring-martingale correction.
//! - [`kernel`]: the kernel `2k - k*k` and the kernel conditional density
//!   estimator with its analytic `θ`-gradient.
//! - [`objective`]: trimming functions and the pseudo-log-likelihood.
//! - [`selection`]: bandwidth cross-validation and truncation selection.
//! - [`fitter`]: the two-stage estimation pipeline.
//! - [`sim`]: the Monte Carlo design and report aggregation.
//! - [`io`]: dataset ingestion, run configuration and report persistence.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod fitter;
pub mod io;
pub mod kernel;
pub mod objective;
pub mod optimize;
pub mod selection;
pub mod sim;
pub mod survival;

pub use error::{Error, Result};
pub use fitter::{fit, fixed_tau_fit, preliminary_fit, standard_errors, FitConfig, IndexModelFit};
pub use survival::{CensoredSample, KmWeights, StepFunction, SurvivalEstimates, TauWindow};
