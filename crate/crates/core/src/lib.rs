//! Selection-bias priors under Bayesian ignorability.
//!
//! The crate quantifies how independent priors on an outcome model and a
//! selection model induce a prior on the selection bias that concentrates at
//! zero as the covariate dimension grows, predicts the resulting ridge
//! estimator bias from sample spectra, and implements the corrections
//! (clever-covariate Z-priors, shared variable selection, propensity-aware
//! Gaussian-process kernels) together with the simulation studies that
//! compare them.
//!
//! Module map:
//! - [`spectra`]: empirical spectra, Stieltjes transforms, bias curves.
//! - [`selection_bias`]: exact and Monte Carlo selection-bias calculations.
//! - [`estimators`]: conjugate ridge posteriors and spike-and-slab Gibbs fits.
//! - [`gp`]: Gaussian-process regression with propensity-aware kernels.
//! - [`simlab`]: data-generating processes, replication engine, summaries.
//! - [`cli`]: command-line commands and CSV/manifest output.

pub mod cli;
pub mod error;
pub mod gp;
pub mod estimators;
pub mod linalg;
mod optim;
pub mod quad;
pub mod rng;
pub mod selection_bias;
pub mod simlab;
pub mod spectra;
pub mod stats;

pub use error::{Error, Result};
