//! Posterior fits for the exposure effect `γ`.
//!
//! Ridge-type fits are conjugate Gaussian posteriors in which the unpenalized
//! coordinates (the exposure, a clever covariate) carry an exactly flat
//! prior. Sparse fits use a spike-and-slab Gibbs sampler.

mod ridge;
mod spike_slab;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::selection_bias::Surface;
use crate::stats;

pub use ridge::*;
pub use spike_slab::*;

/// Default credible level used by all fits.
pub const DEFAULT_LEVEL: f64 = 0.95;

/// Covariates `X` (N×P), exposure `A` and outcome `Y`, with an optional
/// oracle for the selection mean `E[A | X = x]` (a propensity when `A` is
/// binary).
#[derive(Clone)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub a: DVector<f64>,
    pub y: DVector<f64>,
    pub propensity_oracle: Option<Surface>,
}

impl std::fmt::Debug for Dataset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Dataset")
            .field("n", &self.n())
            .field("p", &self.p())
            .field("oracle", &self.propensity_oracle.is_some())
            .finish()
    }
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, a: DVector<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() != a.len() || x.nrows() != y.len() {
            return Err(Error::arg(format!(
                "row counts disagree: X has {}, A has {}, Y has {}",
                x.nrows(),
                a.len(),
                y.len()
            )));
        }
        if x.nrows() == 0 {
            return Err(Error::arg("dataset has no rows"));
        }
        let finite = |s: &[f64]| s.iter().all(|v| v.is_finite());
        if !finite(x.as_slice()) || !finite(a.as_slice()) || !finite(y.as_slice()) {
            return Err(Error::arg("dataset contains non-finite entries"));
        }
        Ok(Dataset {
            x,
            a,
            y,
            propensity_oracle: None,
        })
    }

    pub fn with_oracle(mut self, oracle: Surface) -> Self {
        self.propensity_oracle = Some(oracle);
        self
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// The oracle evaluated at every row of `X`.
    pub fn oracle_values(&self) -> Result<DVector<f64>> {
        let f = self
            .propensity_oracle
            .as_ref()
            .ok_or_else(|| Error::arg("dataset has no propensity oracle"))?;
        let mut row = vec![0.0; self.p()];
        Ok(DVector::from_fn(self.n(), |i, _| {
            for (j, r) in row.iter_mut().enumerate() {
                *r = self.x[(i, j)];
            }
            f(&row)
        }))
    }
}

/// Joint Gaussian posterior over labelled coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub noise_var: f64,
    pub labels: Vec<String>,
}

impl GaussianPosterior {
    pub fn sd(&self, i: usize) -> f64 {
        self.covariance[(i, i)].max(0.0).sqrt()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn with_labels(mut self, labels: &[&str]) -> Self {
        for (slot, l) in self.labels.iter_mut().zip(labels) {
            *slot = (*l).to_string();
        }
        self
    }
}

/// Summary of the posterior for `γ` from one fit.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorResult {
    pub method: String,
    pub estimate: f64,
    pub posterior_sd: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub level: f64,
    pub diagnostics: BTreeMap<String, f64>,
}

impl EstimatorResult {
    /// Gaussian summary with a symmetric interval.
    pub fn gaussian(method: &str, mean: f64, sd: f64, level: f64) -> Result<Self> {
        let (ci_lo, ci_hi) = credible_interval_gaussian(mean, sd, level)?;
        Ok(EstimatorResult {
            method: method.to_string(),
            estimate: mean,
            posterior_sd: sd,
            ci_lo,
            ci_hi,
            level,
            diagnostics: BTreeMap::new(),
        })
    }

    /// Summary of posterior draws: mean, SD and equal-tailed interval.
    pub fn from_draws(method: &str, draws: &[f64], level: f64) -> Result<Self> {
        let (ci_lo, ci_hi) = credible_interval_draws(draws, level)?;
        Ok(EstimatorResult {
            method: method.to_string(),
            estimate: stats::mean(draws),
            posterior_sd: stats::sd(draws),
            ci_lo,
            ci_hi,
            level,
            diagnostics: BTreeMap::new(),
        })
    }

    pub fn with_diagnostic(mut self, key: &str, value: f64) -> Self {
        self.diagnostics.insert(key.to_string(), value);
        self
    }

    pub fn width(&self) -> f64 {
        self.ci_hi - self.ci_lo
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.ci_lo <= truth && truth <= self.ci_hi
    }
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::arg(format!("credible level must lie in (0, 1), got {level}")))
    }
}

/// `mean ± z_{(1+level)/2} sd`.
pub fn credible_interval_gaussian(mean: f64, sd: f64, level: f64) -> Result<(f64, f64)> {
    check_level(level)?;
    if !(sd >= 0.0) {
        return Err(Error::arg(format!("posterior sd must be nonnegative, got {sd}")));
    }
    let z = stats::normal_quantile(0.5 + level / 2.0);
    Ok((mean - z * sd, mean + z * sd))
}

/// Equal-tailed empirical quantiles of posterior draws.
pub fn credible_interval_draws(draws: &[f64], level: f64) -> Result<(f64, f64)> {
    check_level(level)?;
    if draws.len() < 10 {
        return Err(Error::InsufficientSample {
            got: draws.len(),
            need: 10,
        });
    }
    let s = stats::sorted(draws);
    let tail = (1.0 - level) / 2.0;
    Ok((stats::quantile_sorted(&s, tail), stats::quantile_sorted(&s, 1.0 - tail)))
}
