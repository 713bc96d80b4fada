//! Cox survival regression with a known covariate threshold when the main
//! covariate is measured with error.
//!
//! The hazard model is
//! `λ(t|x,z) = λ₀(t)·exp(γᵀz + β·x + ω·(x−τ)₊)` for a known threshold `τ`,
//! observed through a surrogate `W = X + U`. The crate provides:
//!
//! - a weighted, stratified, left-truncated Cox partial-likelihood engine
//!   over arbitrary per-subject relative-risk functions ([`partial_lik`]);
//! - seven estimators: naive, two regression-calibration variants (RC1/RC2),
//!   two induced-relative-risk variants (RR1 and the bootstrap-corrected RR2),
//!   a maximum pseudo-partial-likelihood estimator (MPPLE) and SIMEX
//!   ([`estimators`]);
//! - sandwich covariance estimators with an optional correction for estimated
//!   measurement-error nuisance parameters ([`variance`]);
//! - a numeric solver for the limiting values (asymptotic bias) of the
//!   naive/RC/RR1 estimators ([`asymptotics`]);
//! - a scenario-driven Monte Carlo study harness ([`simulate`]);
//! - Harrell's concordance index with the induced relative risk as the
//!   predictive marker ([`concordance`]);
//! - a command-line surface over CSV/JSON files ([`cli`]).

pub mod asymptotics;
pub mod cli;
pub mod concordance;
pub mod domain;
pub mod error;
pub mod errormodel;
pub mod estimators;
pub mod partial_lik;
pub mod simulate;
pub mod stats;
pub mod variance;

pub use domain::{Cohort, FitResult, Method, StepFn, Subject, ThetaVector};
pub use error::Error;
pub use errormodel::{ErrorModelParams, ReliabilityStudy};

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
