//! The selection bias `Δ(a) = E[Y(a) | A = a] - E[Y(a)]` for linear, sparse
//! and functional models, and Monte Carlo diagnostics of the prior it
//! inherits from independent outcome/selection priors.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{self, Stream};
use crate::spectra::SpectrumSummary;
use crate::stats;

/// A real-valued function of a covariate vector.
pub type Surface = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// A covariance function `ρ(x, x')`.
pub type KernelFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub mc_se: f64,
}

/// Linear outcome and selection models
/// `Y(a) = Xᵀβ + γa + ε`, `A = Xᵀφ + ν`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModelPair {
    pub beta: DVector<f64>,
    pub phi: DVector<f64>,
    pub gamma: f64,
    pub sigma2_y: f64,
    pub sigma2_a: f64,
}

impl LinearModelPair {
    pub fn new(
        beta: DVector<f64>,
        phi: DVector<f64>,
        gamma: f64,
        sigma2_y: f64,
        sigma2_a: f64,
    ) -> Result<Self> {
        if beta.len() != phi.len() {
            return Err(Error::arg(format!(
                "beta has length {} but phi has length {}",
                beta.len(),
                phi.len()
            )));
        }
        if !(sigma2_y > 0.0) || !(sigma2_a > 0.0) {
            return Err(Error::arg("noise variances must be positive"));
        }
        Ok(LinearModelPair {
            beta,
            phi,
            gamma,
            sigma2_y,
            sigma2_a,
        })
    }

    pub fn dim(&self) -> usize {
        self.beta.len()
    }
}

/// Covariance of `X ~ Normal(0, Σ)`.
#[derive(Debug, Clone, PartialEq)]
pub enum CovarianceModel {
    Explicit(DMatrix<f64>),
    Isotropic { dim: usize, sigma2_x: f64 },
    /// `Σ = Λ Λᵀ + σ_x² I` with `Λ` of shape `P × L`.
    LatentFactor { loadings: DMatrix<f64>, sigma_x: f64 },
}

impl CovarianceModel {
    pub fn identity(dim: usize) -> Self {
        CovarianceModel::Isotropic { dim, sigma2_x: 1.0 }
    }

    pub fn explicit(sigma: DMatrix<f64>) -> Result<Self> {
        if !sigma.is_square() || linalg::asymmetry(&sigma) > 1e-8 {
            return Err(Error::arg("explicit covariance must be square and symmetric"));
        }
        crate::spectra::empirical_spectrum(&sigma)?;
        Ok(CovarianceModel::Explicit(sigma))
    }

    pub fn latent_factor(loadings: DMatrix<f64>, sigma_x: f64) -> Result<Self> {
        if !(sigma_x >= 0.0) {
            return Err(Error::arg("sigma_x must be nonnegative"));
        }
        Ok(CovarianceModel::LatentFactor { loadings, sigma_x })
    }

    pub fn dim(&self) -> usize {
        match self {
            CovarianceModel::Explicit(s) => s.nrows(),
            CovarianceModel::Isotropic { dim, .. } => *dim,
            CovarianceModel::LatentFactor { loadings, .. } => loadings.nrows(),
        }
    }

    /// `Σ v` without forming `Σ` for the structured variants.
    pub fn mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            CovarianceModel::Explicit(s) => s * v,
            CovarianceModel::Isotropic { sigma2_x, .. } => v * *sigma2_x,
            CovarianceModel::LatentFactor { loadings, sigma_x } => {
                loadings * loadings.tr_mul(v) + v * (sigma_x * sigma_x)
            }
        }
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        match self {
            CovarianceModel::Explicit(s) => s.clone(),
            CovarianceModel::Isotropic { dim, sigma2_x } => DMatrix::identity(*dim, *dim) * *sigma2_x,
            CovarianceModel::LatentFactor { loadings, sigma_x } => {
                let p = loadings.nrows();
                loadings * loadings.transpose() + DMatrix::identity(p, p) * (sigma_x * sigma_x)
            }
        }
    }

    /// `n` iid rows from `Normal(0, Σ)`.
    pub fn sample_rows<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
        let p = self.dim();
        match self {
            CovarianceModel::Explicit(s) => {
                let (chol, _) = linalg::cholesky_jittered(s)?;
                let z = linalg::normal_matrix(n, p, rng);
                Ok(z * chol.l().transpose())
            }
            CovarianceModel::Isotropic { sigma2_x, .. } => {
                Ok(linalg::normal_matrix(n, p, rng) * sigma2_x.sqrt())
            }
            CovarianceModel::LatentFactor { loadings, sigma_x } => {
                let eta = linalg::normal_matrix(n, loadings.ncols(), rng);
                let noise = linalg::normal_matrix(n, p, rng);
                Ok(eta * loadings.transpose() + noise * *sigma_x)
            }
        }
    }
}

/// Random generator for covariate vectors.
#[derive(Clone)]
pub enum CovariateSampler {
    Gaussian(CovarianceModel),
    Custom {
        dim: usize,
        draw: Arc<dyn Fn(&mut Stream) -> Vec<f64> + Send + Sync>,
    },
}

impl CovariateSampler {
    pub fn dim(&self) -> usize {
        match self {
            CovariateSampler::Gaussian(c) => c.dim(),
            CovariateSampler::Custom { dim, .. } => *dim,
        }
    }

    pub fn sample_rows(&self, n: usize, rng: &mut Stream) -> Result<DMatrix<f64>> {
        match self {
            CovariateSampler::Gaussian(c) => c.sample_rows(n, rng),
            CovariateSampler::Custom { dim, draw } => {
                let mut out = DMatrix::zeros(n, *dim);
                for i in 0..n {
                    let row = draw(rng);
                    if row.len() != *dim {
                        return Err(Error::arg("custom sampler returned a row of the wrong length"));
                    }
                    for (j, v) in row.into_iter().enumerate() {
                        out[(i, j)] = v;
                    }
                }
                Ok(out)
            }
        }
    }
}

/// Nonparametric outcome surface `β(x)` and propensity `φ(x) ∈ (0, 1]`.
#[derive(Clone)]
pub struct FunctionalPair {
    pub outcome: Surface,
    pub propensity: Surface,
    pub covariates: CovariateSampler,
}

/// Prior families for `(β, φ)`.
#[derive(Clone)]
pub enum PriorKind {
    Ridge {
        tau2_beta: f64,
        tau2_phi: f64,
    },
    SpikeSlab {
        p_beta: f64,
        p_phi: f64,
        tau2_beta: f64,
        tau2_phi: f64,
    },
    /// `β ~ GP(0, τ²_β ρ)` with the propensity held fixed; the covariate law
    /// is represented by `design_points` draws.
    Gp {
        kernel: KernelFn,
        tau2_beta: f64,
        propensity: Surface,
        design_points: usize,
    },
}

#[derive(Clone)]
pub struct PriorSpec {
    pub kind: PriorKind,
    /// Shift `ω` in `β = b + ω φ`.
    pub shift: f64,
    pub sigma2_a: f64,
}

impl PriorSpec {
    pub fn ridge(tau2_beta: f64, tau2_phi: f64) -> Self {
        PriorSpec {
            kind: PriorKind::Ridge {
                tau2_beta,
                tau2_phi,
            },
            shift: 0.0,
            sigma2_a: 1.0,
        }
    }

    pub fn spike_slab(p_beta: f64, p_phi: f64, tau2_beta: f64, tau2_phi: f64) -> Self {
        PriorSpec {
            kind: PriorKind::SpikeSlab {
                p_beta,
                p_phi,
                tau2_beta,
                tau2_phi,
            },
            shift: 0.0,
            sigma2_a: 1.0,
        }
    }

    pub fn gp(kernel: KernelFn, tau2_beta: f64, propensity: Surface, design_points: usize) -> Self {
        PriorSpec {
            kind: PriorKind::Gp {
                kernel,
                tau2_beta,
                propensity,
                design_points,
            },
            shift: 0.0,
            sigma2_a: 1.0,
        }
    }

    pub fn with_shift(mut self, omega: f64) -> Self {
        self.shift = omega;
        self
    }

    fn validate(&self) -> Result<()> {
        let pos = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::arg(format!("{name} must be positive, got {v}")))
            }
        };
        pos(self.sigma2_a, "sigma2_a")?;
        match &self.kind {
            PriorKind::Ridge {
                tau2_beta,
                tau2_phi,
            } => {
                pos(*tau2_beta, "tau2_beta")?;
                pos(*tau2_phi, "tau2_phi")
            }
            PriorKind::SpikeSlab {
                p_beta,
                p_phi,
                tau2_beta,
                tau2_phi,
            } => {
                for (p, name) in [(p_beta, "p_beta"), (p_phi, "p_phi")] {
                    if !(0.0..=1.0).contains(p) {
                        return Err(Error::arg(format!("{name} must lie in [0, 1], got {p}")));
                    }
                }
                pos(*tau2_beta, "tau2_beta")?;
                pos(*tau2_phi, "tau2_phi")
            }
            PriorKind::Gp {
                tau2_beta,
                design_points,
                ..
            } => {
                pos(*tau2_beta, "tau2_beta")?;
                if *design_points < 2 {
                    return Err(Error::arg("GP prior needs at least two design points"));
                }
                Ok(())
            }
        }
    }
}

/// `Δ(a) = a φᵀΣβ / (σ²_a + φᵀΣφ)`.
pub fn delta_linear(a: f64, models: &LinearModelPair, cov: &CovarianceModel) -> Result<f64> {
    if cov.dim() != models.dim() {
        return Err(Error::arg(format!(
            "covariance has dimension {} but coefficients have length {}",
            cov.dim(),
            models.dim()
        )));
    }
    Ok(delta_from_parts(a, &models.beta, &models.phi, cov, models.sigma2_a))
}

fn delta_from_parts(
    a: f64,
    beta: &DVector<f64>,
    phi: &DVector<f64>,
    cov: &CovarianceModel,
    sigma2_a: f64,
) -> f64 {
    let sphi = cov.mul_vec(phi);
    a * (sphi.dot(beta) / (sigma2_a + sphi.dot(phi)))
}

/// Sparse form of [`delta_linear`] under `Σ = σ²_x I`: the numerator runs
/// over the shared support of `β` and `φ`, the denominator over the support
/// of `φ`. Sparse vectors are `(index, value)` lists of length-`dim` vectors.
pub fn delta_sparse(
    a: f64,
    beta: &[(usize, f64)],
    phi: &[(usize, f64)],
    sigma2_x: f64,
    sigma2_a: f64,
) -> Result<f64> {
    if !(sigma2_x > 0.0) || !(sigma2_a > 0.0) {
        return Err(Error::arg("variances must be positive"));
    }
    let mut seen = std::collections::BTreeMap::new();
    for &(j, v) in phi {
        if seen.insert(j, v).is_some() {
            return Err(Error::arg(format!("duplicate index {j} in phi")));
        }
    }
    let mut beta_seen = std::collections::BTreeSet::new();
    let mut num = 0.0;
    for &(j, b) in beta {
        if !beta_seen.insert(j) {
            return Err(Error::arg(format!("duplicate index {j} in beta")));
        }
        if let Some(&f) = seen.get(&j) {
            if b != 0.0 && f != 0.0 {
                num += sigma2_x * f * b;
            }
        }
    }
    let den = sigma2_a + phi.iter().map(|&(_, f)| sigma2_x * f * f).sum::<f64>();
    Ok(a * num / den)
}

/// `Δ = Cov{β(X), φ(X)} / E{φ(X)}` by Monte Carlo over `n_draws` covariates,
/// with a delta-method standard error.
pub fn delta_functional(pair: &FunctionalPair, n_draws: usize, seed: u64) -> Result<McEstimate> {
    if n_draws < 100 {
        return Err(Error::arg(format!("need at least 100 draws, got {n_draws}")));
    }
    let mut stream = rng::stream(seed);
    let x = pair.covariates.sample_rows(n_draws, &mut stream)?;
    let mut b = Vec::with_capacity(n_draws);
    let mut f = Vec::with_capacity(n_draws);
    let mut row = vec![0.0; x.ncols()];
    for i in 0..n_draws {
        for (j, r) in row.iter_mut().enumerate() {
            *r = x[(i, j)];
        }
        b.push((pair.outcome)(&row));
        f.push((pair.propensity)(&row));
    }
    ratio_of_covariance(&b, &f)
}

fn ratio_of_covariance(b: &[f64], f: &[f64]) -> Result<McEstimate> {
    let n = b.len() as f64;
    let fbar = stats::mean(f);
    if fbar.abs() < 1e-6 {
        return Err(Error::DegeneratePropensity(fbar));
    }
    let bbar = stats::mean(b);
    let cov = b
        .iter()
        .zip(f)
        .map(|(bi, fi)| (bi - bbar) * (fi - fbar))
        .sum::<f64>()
        / n;
    let est = cov / fbar;
    // influence function of C/M
    let infl: Vec<f64> = b
        .iter()
        .zip(f)
        .map(|(bi, fi)| ((bi - bbar) * (fi - fbar) - cov) / fbar - cov * (fi - fbar) / (fbar * fbar))
        .collect();
    Ok(McEstimate {
        estimate: est,
        mc_se: stats::sd(&infl) / n.sqrt(),
    })
}

/// Normal-approximation scale `c / P` of the prior on `Δ(a)` under
/// independent ridge priors, `c = a² (τ²_β/τ²_φ)(λ̄²/λ̃²)`, with the moments
/// taken from the spectrum of `Σ`.
pub fn clt_scale(a: f64, prior: &PriorSpec, spec: &SpectrumSummary) -> Result<f64> {
    let PriorKind::Ridge {
        tau2_beta,
        tau2_phi,
    } = prior.kind
    else {
        return Err(Error::arg("clt_scale requires the ridge prior"));
    };
    prior.validate()?;
    let m1 = spec.mean_eig();
    if m1 == 0.0 {
        return Err(Error::DegenerateSpectrum);
    }
    let c = a * a * (tau2_beta / tau2_phi) * (spec.mean_sq_eig() / (m1 * m1));
    Ok(c / spec.dim() as f64)
}

/// Draws of `Δ(a)` from the prior. Draw `i` uses its own sub-stream, so the
/// output is independent of how the loop is scheduled.
pub fn prior_delta_draws(
    prior: &PriorSpec,
    cov: &CovarianceModel,
    a: f64,
    n_draws: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if n_draws == 0 {
        return Err(Error::arg("n_draws must be at least 1"));
    }
    prior.validate()?;
    let p = cov.dim();
    let omega = prior.shift;
    let sigma2_a = prior.sigma2_a;
    match &prior.kind {
        PriorKind::Ridge {
            tau2_beta,
            tau2_phi,
        } => {
            let (sb, sf) = (tau2_beta.sqrt(), tau2_phi.sqrt());
            Ok((0..n_draws)
                .into_par_iter()
                .map(|i| {
                    let mut s = rng::stream(rng::derive_seed(seed, &["prior-ridge"], i as u64));
                    let phi = linalg::normal_vector(p, &mut s) * sf;
                    let beta = linalg::normal_vector(p, &mut s) * sb + &phi * omega;
                    delta_from_parts(a, &beta, &phi, cov, sigma2_a)
                })
                .collect())
        }
        PriorKind::SpikeSlab {
            p_beta,
            p_phi,
            tau2_beta,
            tau2_phi,
        } => {
            let (sb, sf) = (tau2_beta.sqrt(), tau2_phi.sqrt());
            let draw = |s: &mut Stream, prob: f64, scale: f64| {
                DVector::from_fn(p, |_, _| {
                    let on = s.random::<f64>() < prob;
                    let z: f64 = s.sample(StandardNormal);
                    if on {
                        z * scale
                    } else {
                        0.0
                    }
                })
            };
            Ok((0..n_draws)
                .into_par_iter()
                .map(|i| {
                    let mut s = rng::stream(rng::derive_seed(seed, &["prior-sas"], i as u64));
                    let phi = draw(&mut s, *p_phi, sf);
                    let beta = draw(&mut s, *p_beta, sb) + &phi * omega;
                    delta_from_parts(a, &beta, &phi, cov, sigma2_a)
                })
                .collect())
        }
        PriorKind::Gp {
            kernel,
            tau2_beta,
            propensity,
            design_points,
        } => {
            let mut design_stream = rng::stream(rng::derive_seed(seed, &["prior-gp-design"], 0));
            let x = cov.sample_rows(*design_points, &mut design_stream)?;
            let k = gram_matrix(kernel, &x)? * *tau2_beta;
            let (chol, _) = linalg::cholesky_jittered(&k)?;
            let l = chol.l();
            let phi = eval_rows(propensity, &x);
            let phi_bar = stats::mean(&phi);
            if phi_bar.abs() < 1e-6 {
                return Err(Error::DegeneratePropensity(phi_bar));
            }
            let phi_c: DVector<f64> =
                DVector::from_iterator(phi.len(), phi.iter().map(|v| v - phi_bar));
            let m = *design_points as f64;
            Ok((0..n_draws)
                .into_par_iter()
                .map(|i| {
                    let mut s = rng::stream(rng::derive_seed(seed, &["prior-gp"], i as u64));
                    let beta = linalg::mvn_from_factor(&l, &mut s);
                    // Cov(β, φ) over the design; a shift adds ω Var(φ).
                    let cov_bf = beta.dot(&phi_c) / m + omega * phi_c.norm_squared() / m;
                    a * cov_bf / phi_bar
                })
                .collect())
        }
    }
}

fn eval_rows(f: &Surface, x: &DMatrix<f64>) -> Vec<f64> {
    let mut row = vec![0.0; x.ncols()];
    (0..x.nrows())
        .map(|i| {
            for (j, r) in row.iter_mut().enumerate() {
                *r = x[(i, j)];
            }
            f(&row)
        })
        .collect()
}

/// Gram matrix `K_ij = ρ(x_i, x_j)` over the rows of `x`.
pub fn gram_matrix(rho: &KernelFn, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = x.nrows();
    let rows: Vec<Vec<f64>> = (0..m).map(|i| x.row(i).iter().cloned().collect()).collect();
    let mut k = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..=i {
            let v = rho(&rows[i], &rows[j]);
            if !v.is_finite() {
                return Err(Error::Numeric(format!("kernel value at ({i}, {j}) is not finite")));
            }
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// Double-centered Gram matrix `K - 1K/M - K1/M + 1K1/M²`, the empirical
/// version of the covariance of `β - ∫β dF_X`.
pub fn centered_kernel(rho: &KernelFn, x_sample: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x_sample.nrows() < 2 {
        return Err(Error::arg("centered_kernel needs at least two rows"));
    }
    Ok(double_center(gram_matrix(rho, x_sample)?))
}

fn double_center(mut k: DMatrix<f64>) -> DMatrix<f64> {
    let m = k.nrows();
    let row_means: Vec<f64> = (0..m).map(|i| k.row(i).sum() / m as f64).collect();
    let grand = row_means.iter().sum::<f64>() / m as f64;
    for i in 0..m {
        for j in 0..m {
            k[(i, j)] += grand - row_means[i] - row_means[j];
        }
    }
    k
}

/// Prior variance `c` of `Δ` when `β ~ GP(0, τ²_β ρ)` and `φ` is fixed:
/// `c = τ²_β / E{φ}² ∬ φ̄(x) φ̄(x') ρ̄(x, x') dF_X dF_X`,
/// estimated with the U-statistic (off-diagonal pairs) over `n_draws`
/// covariate draws. The standard error uses the Hoeffding projection.
pub fn gp_delta_variance(
    rho: &KernelFn,
    tau2_beta: f64,
    pair: &FunctionalPair,
    n_draws: usize,
    seed: u64,
) -> Result<McEstimate> {
    if n_draws < 100 {
        return Err(Error::arg(format!("need at least 100 draws, got {n_draws}")));
    }
    if !(tau2_beta > 0.0) {
        return Err(Error::arg("tau2_beta must be positive"));
    }
    let mut stream = rng::stream(seed);
    let x = pair.covariates.sample_rows(n_draws, &mut stream)?;
    let phi = eval_rows(&pair.propensity, &x);
    let kbar = centered_kernel(rho, &x)?;
    u_statistic_variance(&kbar, &phi, tau2_beta)
}

fn u_statistic_variance(kbar: &DMatrix<f64>, phi: &[f64], tau2_beta: f64) -> Result<McEstimate> {
    let m = phi.len();
    let phi_bar = stats::mean(phi);
    if phi_bar.abs() < 1e-6 {
        return Err(Error::DegeneratePropensity(phi_bar));
    }
    let phi_c: Vec<f64> = phi.iter().map(|v| v - phi_bar).collect();
    let proj: Vec<f64> = (0..m)
        .map(|i| {
            let s: f64 = (0..m)
                .filter(|&j| j != i)
                .map(|j| phi_c[j] * kbar[(i, j)])
                .sum();
            phi_c[i] * s / (m - 1) as f64
        })
        .collect();
    let u = stats::mean(&proj);
    let scale = tau2_beta / (phi_bar * phi_bar);
    Ok(McEstimate {
        estimate: scale * u,
        mc_se: scale * 2.0 * stats::sd(&proj) / (m as f64).sqrt(),
    })
}

/// Gaussian kernel `exp{-‖x - x'‖² / (2ξ)}`.
pub fn gaussian_kernel_isotropic(xi: f64) -> Result<KernelFn> {
    if !(xi > 0.0) {
        return Err(Error::arg(format!("bandwidth xi must be positive, got {xi}")));
    }
    Ok(Arc::new(move |x: &[f64], y: &[f64]| {
        let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        (-0.5 * d2 / xi).exp()
    }))
}

/// Gaussian kernel `exp{-(x - x')ᵀ H⁻¹ (x - x') / 2}` for a positive
/// definite bandwidth matrix `H`.
pub fn gaussian_kernel(h: &DMatrix<f64>) -> Result<KernelFn> {
    let whiten = whitening(h)?;
    Ok(Arc::new(move |x: &[f64], y: &[f64]| {
        let d = DVector::from_iterator(x.len(), x.iter().zip(y).map(|(a, b)| a - b));
        let z = &whiten * d;
        (-0.5 * z.norm_squared()).exp()
    }))
}

/// `L⁻¹` with `H = L Lᵀ`; singular `H` is an argument error.
fn whitening(h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !h.is_square() || linalg::asymmetry(h) > 1e-8 {
        return Err(Error::arg("bandwidth matrix must be square and symmetric"));
    }
    let chol = nalgebra::Cholesky::new(h.clone())
        .ok_or_else(|| Error::arg("bandwidth matrix H is singular or not positive definite"))?;
    let l = chol.l();
    let p = h.nrows();
    l.solve_lower_triangular(&DMatrix::identity(p, p))
        .ok_or_else(|| Error::arg("bandwidth matrix H is singular"))
}

pub fn linear_kernel() -> KernelFn {
    Arc::new(|x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum())
}

pub fn constant_kernel(c: f64) -> KernelFn {
    Arc::new(move |_: &[f64], _: &[f64]| c)
}

/// Bandwidth choice for the Gaussian kernel in [`kernel_decay_curve`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BandwidthRule {
    /// `H = k Σ`
    ScaledCovariance(f64),
    /// `H = ξ I`
    Isotropic(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecayPoint {
    pub p: usize,
    pub c: McEstimate,
    /// Sample mean of `φ(X)`; must stay bounded away from zero across `P`.
    pub mean_propensity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecayCurve {
    pub points: Vec<DecayPoint>,
    /// Least-squares slope of `ln c` against `P`.
    pub slope: f64,
    pub slope_se: f64,
}

/// Prior variance of `Δ` under a Gaussian-kernel GP prior as the dimension
/// grows, with a log-linear fit of `ln c` on `P`.
pub fn kernel_decay_curve(
    cov_family: &dyn Fn(usize) -> CovarianceModel,
    rule: BandwidthRule,
    phi_family: &dyn Fn(usize) -> Surface,
    p_list: &[usize],
    n_draws: usize,
    seed: u64,
) -> Result<DecayCurve> {
    if p_list.len() < 3 {
        return Err(Error::arg("kernel_decay_curve needs at least three dimensions"));
    }
    if p_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::arg("dimension list must be strictly increasing"));
    }
    if n_draws < 100 {
        return Err(Error::arg(format!("need at least 100 draws, got {n_draws}")));
    }
    let mut points = Vec::with_capacity(p_list.len());
    for &p in p_list {
        let cov = cov_family(p);
        if cov.dim() != p {
            return Err(Error::arg(format!("covariance family returned dimension {} for P={p}", cov.dim())));
        }
        let h = match rule {
            BandwidthRule::ScaledCovariance(k) => {
                if !(k > 0.0) {
                    return Err(Error::arg("bandwidth scale k must be positive"));
                }
                cov.matrix() * k
            }
            BandwidthRule::Isotropic(xi) => {
                if !(xi > 0.0) {
                    return Err(Error::arg("bandwidth xi must be positive"));
                }
                DMatrix::identity(p, p) * xi
            }
        };
        let whiten = whitening(&h)?;
        let phi_fn = phi_family(p);
        let mut stream = rng::stream(rng::derive_seed(seed, &["decay"], p as u64));
        let x = cov.sample_rows(n_draws, &mut stream)?;
        let phi = eval_rows(&phi_fn, &x);
        // whitened rows turn the kernel into exp(-‖z - z'‖²/2)
        let z = &x * whiten.transpose();
        let unit = gaussian_kernel_isotropic(1.0)?;
        let kbar = double_center(gram_matrix(&unit, &z)?);
        let c = u_statistic_variance(&kbar, &phi, 1.0)?;
        points.push(DecayPoint {
            p,
            c,
            mean_propensity: stats::mean(&phi),
        });
    }
    let xs: Vec<f64> = points.iter().map(|pt| pt.p as f64).collect();
    let mut ys = Vec::with_capacity(points.len());
    for pt in &points {
        if !(pt.c.estimate > 0.0) {
            return Err(Error::Numeric(format!(
                "estimated variance {:e} at P={} is not positive; increase n_draws",
                pt.c.estimate, pt.p
            )));
        }
        ys.push(pt.c.estimate.ln());
    }
    let (slope, slope_se) = ols_slope(&xs, &ys);
    Ok(DecayCurve {
        points,
        slope,
        slope_se,
    })
}

fn ols_slope(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let xbar = stats::mean(xs);
    let ybar = stats::mean(ys);
    let sxx: f64 = xs.iter().map(|x| (x - xbar).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - xbar) * (y - ybar)).sum();
    let slope = sxy / sxx;
    let rss: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - ybar - slope * (x - xbar)).powi(2))
        .sum();
    let se = (rss / (n - 2.0) / sxx).sqrt();
    (slope, se)
}
