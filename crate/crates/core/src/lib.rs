//! Randomization-based inference for two-arm completely randomized trials
//! that adjust for covariates only when a Mahalanobis balance test fails.
//!
//! The crate is organised bottom-up:
//!
//! * [`ols`]: least squares with sandwich covariances, shared by every estimator.
//! * [`population`]: finite populations, their oracle parameters and the
//!   simulation recipes.
//! * [`design`]: complete randomization, rerandomization and the balance test.
//! * [`estimators`]: difference in means, additive and interacted adjustment,
//!   and the preliminary-test composites.
//! * [`refdist`]: truncated-normal mixture laws, their quantiles and the
//!   plug-in intervals built from them.
//! * [`frt`]: Fisher randomization tests (unconditional, conditional,
//!   prepivoted).
//! * [`simharness`]: seeded Monte Carlo studies.
//!
//! Data-parallel loops go through [`exec`], which uses rayon when the
//! `parallel` feature is on and falls back to plain iteration otherwise.
//! Results are identical either way.

pub mod design;
pub mod error;
pub mod estimators;
pub mod exec;
pub mod frt;
pub mod io;
pub mod ols;
pub mod population;
pub mod refdist;
pub mod rng;
pub mod simharness;

pub use error::{Error, Result};
