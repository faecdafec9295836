//! Monte Carlo bias of ridge estimators of `γ` under the random-effects
//! model with isotropic Gaussian covariates.
//!
//! `φ ~ Normal(0, τ²/P I)`, `β = ω₀φ + b` with `b ~ Normal(0, τ²/P I)`,
//! `τ² = r/η`, `A = Xφ + ν`, `Y = Xβ + γ₀A + ε`, unit noise.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimators::{Dataset, FirstStage, RidgeContext, RidgeOptions};
use crate::linalg;
use crate::rng;
use crate::selection_bias::McEstimate;
use crate::spectra::{self, BiasInputs, SpectrumSummary};
use crate::stats;

/// `γ₀`; the estimators are equivariant in it, so the bias does not depend
/// on its value.
pub const BIAS_GAMMA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasDesign {
    pub n: usize,
    pub p: usize,
    pub eta: f64,
    pub omega0: f64,
}

impl BiasDesign {
    pub fn new(n: usize, p: usize, eta: f64, omega0: f64) -> Result<Self> {
        if n < 2 || p < 1 {
            return Err(Error::arg("bias design needs N >= 2 and P >= 1"));
        }
        if !(eta > 0.0 && eta.is_finite()) || !omega0.is_finite() {
            return Err(Error::arg("eta must be positive and omega0 finite"));
        }
        Ok(BiasDesign { n, p, eta, omega0 })
    }

    pub fn aspect_ratio(&self) -> f64 {
        self.p as f64 / self.n as f64
    }

    pub fn tau2(&self) -> f64 {
        self.aspect_ratio() / self.eta
    }

    pub fn inputs(&self, lambda: f64) -> Result<BiasInputs> {
        BiasInputs::from_eta(lambda, self.aspect_ratio(), self.eta, self.omega0)
    }

    /// One dataset, with the true `Xφ` attached as the propensity oracle.
    pub fn draw(&self, seed: u64) -> Result<Dataset> {
        let mut s = rng::stream(seed);
        let sc = (self.tau2() / self.p as f64).sqrt();
        let phi = linalg::normal_vector(self.p, &mut s) * sc;
        let beta = linalg::normal_vector(self.p, &mut s) * sc + &phi * self.omega0;
        let x = linalg::normal_matrix(self.n, self.p, &mut s);
        let a = &x * &phi + linalg::normal_vector(self.n, &mut s);
        let y = &x * &beta + &a * BIAS_GAMMA + linalg::normal_vector(self.n, &mut s);
        let oracle = Arc::new(move |r: &[f64]| r.iter().zip(phi.iter()).map(|(u, v)| u * v).sum());
        Ok(Dataset::new(x, a, y)?.with_oracle(oracle))
    }

    /// Pooled spectra `(F, G)` of `draws` independent designs.
    pub fn pooled_spectra(&self, draws: usize, seed: u64) -> Result<(SpectrumSummary, SpectrumSummary)> {
        if draws == 0 {
            return Err(Error::arg("need at least one spectrum draw"));
        }
        let mut f = Vec::with_capacity(draws * self.n);
        let mut g = Vec::with_capacity(draws * self.p);
        for d in 0..draws {
            let mut s = rng::stream(rng::derive_seed(seed, &["bias-spectrum"], d as u64));
            let x = linalg::normal_matrix(self.n, self.p, &mut s);
            let (sf, sg) = spectra::sample_spectra(&x)?;
            f.extend_from_slice(sf.eigenvalues());
            g.extend_from_slice(sg.eigenvalues());
        }
        Ok((SpectrumSummary::from_eigenvalues(f)?, SpectrumSummary::from_eigenvalues(g)?))
    }
}

/// Estimator whose bias is simulated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BiasEstimator {
    Naive,
    /// Two-stage Z-prior. `Penalty(λ₁)` with `λ₁ <= 0` means "the same
    /// penalty as the outcome model".
    ZPrior(FirstStage),
}

impl BiasEstimator {
    /// Z-prior whose first stage shares the outcome penalty.
    pub const SHARED_PENALTY: BiasEstimator = BiasEstimator::ZPrior(FirstStage::Penalty(0.0));
}

/// `γ̂ - γ₀` for every penalty on one dataset.
pub fn bias_errors(design: &BiasDesign, lambdas: &[f64], est: BiasEstimator, seed: u64) -> Result<Vec<f64>> {
    let data = design.draw(seed)?;
    let ctx = RidgeContext::new(&data);
    let opts = RidgeOptions::default();
    let fixed_stage = match est {
        BiasEstimator::ZPrior(FirstStage::Penalty(l)) if l <= 0.0 => None,
        BiasEstimator::ZPrior(fs) => Some(ctx.stage_one(fs)?),
        BiasEstimator::Naive => None,
    };
    lambdas
        .iter()
        .map(|&lam| {
            let r = match est {
                BiasEstimator::Naive => ctx.naive(lam, &opts)?,
                BiasEstimator::ZPrior(_) => match &fixed_stage {
                    Some(stage) => ctx.direct(lam, &opts, stage)?,
                    None => ctx.direct(lam, &opts, &ctx.stage_one(FirstStage::Penalty(lam))?)?,
                },
            };
            Ok(r.estimate - BIAS_GAMMA)
        })
        .collect()
}

/// Monte Carlo mean of `γ̂ - γ₀` at each penalty, with its standard error.
/// Replication `r` draws from `derive_seed(seed, ["bias-mc"], r)`; the same
/// datasets are reused across penalties.
pub fn bias_monte_carlo(
    design: &BiasDesign,
    lambdas: &[f64],
    est: BiasEstimator,
    reps: usize,
    seed: u64,
) -> Result<Vec<McEstimate>> {
    if reps < 2 {
        return Err(Error::InsufficientSample { got: reps, need: 2 });
    }
    if lambdas.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
        return Err(Error::arg("ridge penalties must be positive"));
    }
    let errs: Vec<Vec<f64>> = (0..reps)
        .into_par_iter()
        .map(|r| bias_errors(design, lambdas, est, rng::derive_seed(seed, &["bias-mc"], r as u64)))
        .collect::<Result<_>>()?;
    Ok((0..lambdas.len())
        .map(|k| {
            let col: Vec<f64> = errs.iter().map(|e| e[k]).collect();
            McEstimate {
                estimate: stats::mean(&col),
                mc_se: stats::mcse(&col),
            }
        })
        .collect())
}

/// Closed-form bias at each penalty from pooled design spectra.
pub fn bias_formula(
    design: &BiasDesign,
    lambdas: &[f64],
    zprior: bool,
    spectrum_draws: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let (f, g) = design.pooled_spectra(spectrum_draws, seed)?;
    lambdas
        .iter()
        .map(|&lam| {
            let inputs = design.inputs(lam)?;
            if zprior {
                spectra::zprior_ridge_bias(&g, &inputs)
            } else {
                spectra::naive_ridge_bias(&f, &inputs)
            }
        })
        .collect()
}

/// Large-penalty limit of the naive bias, `ω₀ λ̃/(λ̃ + η)`, with `λ̃` the
/// mean eigenvalue of `XXᵀ/N`.
pub fn naive_bias_limit(design: &BiasDesign, mean_eig: f64) -> f64 {
    design.omega0 * mean_eig / (mean_eig + design.eta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    #[test]
    fn zero_shift_has_zero_formula() {
        let d = BiasDesign::new(20, 40, 1.0, 0.0).unwrap();
        let b = bias_formula(&d, &[0.5, 1.0], false, 2, 1).unwrap();
        assert!(b.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn draws_are_seeded() {
        let d = BiasDesign::new(10, 15, 2.0, 1.0).unwrap();
        assert_eq!(d.draw(3).unwrap().y, d.draw(3).unwrap().y);
        let a: DVector<f64> = d.draw(3).unwrap().oracle_values().unwrap();
        assert_eq!(a.len(), 10);
    }
}
