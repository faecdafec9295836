//! Conjugate ridge posteriors with flat coordinates, the empirical-Bayes
//! selection fit and the two-stage clever-covariate estimators.

use nalgebra::{DMatrix, DVector};

use super::{Dataset, EstimatorResult, GaussianPosterior, DEFAULT_LEVEL};
use crate::error::{Error, Result};
use crate::linalg::{GramEigen, JITTER_MAX, JITTER_START};

/// Relative singular-value floor below which a flat block is declared
/// unidentified.
const FLAT_RANK_TOL: f64 = 1e-10;

/// Outcome hyperparameters are searched within `exp(±OUTCOME_LOG_BOUND)`.
const OUTCOME_LOG_BOUND: f64 = 20.0;

fn check_noise(noise_var: f64) -> Result<()> {
    if noise_var > 0.0 && noise_var.is_finite() {
        Ok(())
    } else {
        Err(Error::arg(format!("noise variance must be positive, got {noise_var}")))
    }
}

fn check_flat_rank(cols: &DMatrix<f64>) -> Result<()> {
    if cols.ncols() == 0 {
        return Ok(());
    }
    if cols.nrows() < cols.ncols() {
        return Err(Error::Identifiability(format!(
            "{} flat coefficients but only {} observations",
            cols.ncols(),
            cols.nrows()
        )));
    }
    let sv = cols.clone().singular_values();
    let hi = sv.max();
    let lo = sv.min();
    if !(hi > 0.0) || lo <= FLAT_RANK_TOL * hi {
        return Err(Error::Identifiability(format!(
            "flat block is rank deficient (singular values {lo:e} / {hi:e})"
        )));
    }
    Ok(())
}

/// Gaussian posterior of `θ` in `y = Ψθ + ε`, `ε ~ Normal(0, σ² I)`, with
/// independent priors `θ_j ~ Normal(0, 1/penalty_j)` and a flat prior where
/// `penalty_j = 0`:
/// mean `(ΨᵀΨ + σ² diag(penalty))⁻¹ Ψᵀ y`, covariance `σ² (ΨᵀΨ + σ² diag(penalty))⁻¹`.
pub fn ridge_posterior(
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    penalty: &[f64],
    noise_var: f64,
) -> Result<GaussianPosterior> {
    let (n, q) = design.shape();
    if n == 0 {
        return Err(Error::arg("ridge_posterior needs at least one observation"));
    }
    if y.len() != n {
        return Err(Error::arg(format!("design has {n} rows but y has length {}", y.len())));
    }
    if penalty.len() != q {
        return Err(Error::arg(format!(
            "penalty has length {} but design has {q} columns",
            penalty.len()
        )));
    }
    if penalty.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
        return Err(Error::arg("penalties must be finite and nonnegative"));
    }
    check_noise(noise_var)?;

    let flat: Vec<usize> = (0..q).filter(|&j| penalty[j] == 0.0).collect();
    check_flat_rank(&design.select_columns(&flat))?;

    let mut m = design.tr_mul(design);
    for j in 0..q {
        m[(j, j)] += noise_var * penalty[j];
    }
    let chol = factor_penalized_only(m, penalty)?;
    let mean = chol.solve(&design.tr_mul(y));
    let mut covariance = chol.inverse() * noise_var;
    covariance = (&covariance + covariance.transpose()) * 0.5;
    Ok(GaussianPosterior {
        mean,
        covariance,
        noise_var,
        labels: (0..q).map(|j| format!("theta{j}")).collect(),
    })
}

/// Cholesky of the posterior precision; on failure, jitter is added to the
/// penalized diagonal only.
fn factor_penalized_only(
    m: DMatrix<f64>,
    penalty: &[f64],
) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if let Some(c) = nalgebra::Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let mut jitter = JITTER_START;
    while jitter <= JITTER_MAX * (1.0 + 1e-9) {
        let mut a = m.clone();
        for (j, p) in penalty.iter().enumerate() {
            if *p > 0.0 {
                a[(j, j)] += jitter;
            }
        }
        if let Some(c) = nalgebra::Cholesky::new(a) {
            return Ok(c);
        }
        jitter *= 10.0;
    }
    Err(Error::Numeric("posterior precision is not positive definite".into()))
}

/// Log10 grid for the selection-model signal variance.
pub const EB_LOG10_MIN: f64 = -4.0;
pub const EB_LOG10_MAX: f64 = 4.0;
pub const EB_LOG10_STEP: f64 = 0.1;

fn eb_grid() -> Vec<f64> {
    let n = ((EB_LOG10_MAX - EB_LOG10_MIN) / EB_LOG10_STEP).round() as usize;
    (0..=n).map(|i| EB_LOG10_MIN + i as f64 * EB_LOG10_STEP).collect()
}

/// Marginal log-likelihood of `A` under `φ ~ Normal(0, τ²/P I)`, given the
/// eigenvalues `d` of `XXᵀ` and the rotated exposure `Uᵀ A`.
fn eb_loglik_rotated(values: &DVector<f64>, a_rot: &DVector<f64>, p: usize, tau2: f64, noise_var: f64) -> f64 {
    let mut ll = -0.5 * values.len() as f64 * (2.0 * std::f64::consts::PI).ln();
    for (d, a) in values.iter().zip(a_rot.iter()) {
        let v = tau2 * d / p as f64 + noise_var;
        ll -= 0.5 * (v.ln() + a * a / v);
    }
    ll
}

/// Marginal log-likelihood of `A` given `X` at signal variance `τ²`, unit
/// noise.
pub fn eb_tau2_loglik(a: &DVector<f64>, x: &DMatrix<f64>, tau2: f64) -> Result<f64> {
    if a.len() != x.nrows() {
        return Err(Error::arg("A and X disagree in length"));
    }
    let eig = GramEigen::of_rows(x);
    Ok(eb_loglik_rotated(&eig.values, &eig.rotate(a), x.ncols(), tau2, 1.0))
}

/// Empirical-Bayes estimate of `τ²` in `φ ~ Normal(0, τ²/P I)` with unit
/// noise: log-grid search refined by golden section.
pub fn eb_tau2(a: &DVector<f64>, x: &DMatrix<f64>) -> Result<f64> {
    if a.len() != x.nrows() {
        return Err(Error::arg("A and X disagree in length"));
    }
    if a.len() < 2 {
        return Err(Error::arg("eb_tau2 needs at least two observations"));
    }
    let eig = GramEigen::of_rows(x);
    eb_tau2_rotated(&eig.values, &eig.rotate(a), x.ncols(), 1.0)
}

fn eb_tau2_rotated(values: &DVector<f64>, a_rot: &DVector<f64>, p: usize, noise_var: f64) -> Result<f64> {
    let f = |lg: f64| eb_loglik_rotated(values, a_rot, p, 10f64.powf(lg), noise_var);
    let grid = eb_grid();
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (i, &g) in grid.iter().enumerate() {
        let v = f(g);
        if v.is_finite() && v > best.0 {
            best = (v, i);
        }
    }
    if !best.0.is_finite() {
        return Err(Error::Numeric("marginal likelihood is not finite on the grid".into()));
    }
    let k = best.1;
    let lo = grid[k.saturating_sub(1)];
    let hi = grid[(k + 1).min(grid.len() - 1)];
    let (x_ref, v_ref) = golden_max(&f, lo, hi, 1e-8);
    if v_ref.is_finite() && v_ref >= best.0 {
        Ok(10f64.powf(x_ref))
    } else {
        Ok(10f64.powf(grid[k]))
    }
}

/// Golden-section maximization of a unimodal function on `[lo, hi]`.
pub(crate) fn golden_max(f: &dyn Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64) {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - g * (hi - lo);
    let mut d = lo + g * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    while hi - lo > tol {
        if fc > fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - g * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + g * (hi - lo);
            fd = f(d);
        }
    }
    let x = 0.5 * (lo + hi);
    (x, f(x))
}

/// How the clever covariate `Â = X φ̂` is obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FirstStage {
    /// Ridge posterior mean with `τ²` chosen by [`eb_tau2`].
    EmpiricalBayes,
    /// Ridge posterior mean with prior precision `N λ₁`, on the same scale
    /// as the outcome penalty.
    Penalty(f64),
    /// `Â_i = E[A | X_i]` from the dataset's oracle.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RidgeOptions {
    /// Outcome noise variance `σ²_y`, treated as known.
    pub noise_var: f64,
    pub level: f64,
    pub first_stage: FirstStage,
}

impl Default for RidgeOptions {
    fn default() -> Self {
        RidgeOptions {
            noise_var: 1.0,
            level: DEFAULT_LEVEL,
            first_stage: FirstStage::EmpiricalBayes,
        }
    }
}

/// Outcome-model design used by a ridge fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RidgeMethod {
    /// `[A, X]`
    Naive,
    /// `[A, Â, X]`
    Direct,
    /// `[A - Â, X]`
    Debiased,
}

/// Outcome prior penalty `λ` (with `β ~ Normal(0, (Nλ)⁻¹ I)`) and noise
/// variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutcomeScale {
    pub lambda: f64,
    pub noise_var: f64,
}

/// The clever covariate in eigen-coordinates of `XXᵀ`.
#[derive(Debug, Clone)]
pub struct StageOne {
    a_hat_rot: DVector<f64>,
    pub tau2: Option<f64>,
}

/// Shared work for ridge fits on one dataset: the eigen-decomposition of
/// `XXᵀ`, reused across penalties and methods.
///
/// With `β ~ Normal(0, (Nλ)⁻¹ I)` integrated out, `Y ~ Normal(Ψ_f θ_f, V)`
/// with `V = σ² I + XXᵀ/(Nλ)`, diagonal in the eigenbasis. The flat
/// coefficients' posterior is then the generalized least-squares fit.
pub struct RidgeContext<'a> {
    data: &'a Dataset,
    eig: GramEigen,
    y_rot: DVector<f64>,
    a_rot: DVector<f64>,
}

impl<'a> RidgeContext<'a> {
    pub fn new(data: &'a Dataset) -> Self {
        let eig = GramEigen::of_rows(&data.x);
        let y_rot = eig.rotate(&data.y);
        let a_rot = eig.rotate(&data.a);
        RidgeContext {
            data,
            eig,
            y_rot,
            a_rot,
        }
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eig.values
    }

    fn flat_posterior(
        &self,
        cols: &[&DVector<f64>],
        lambda: f64,
        noise_var: f64,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        check_penalty(lambda)?;
        check_noise(noise_var)?;
        let n = self.data.n();
        let q = cols.len();
        let mut psi = DMatrix::zeros(n, q);
        for (j, c) in cols.iter().enumerate() {
            psi.set_column(j, c);
        }
        check_flat_rank(&psi)?;
        let prec = n as f64 * lambda;
        let w: Vec<f64> = self
            .eig
            .values
            .iter()
            .map(|d| 1.0 / (noise_var + d / prec))
            .collect();
        let mut f = DMatrix::zeros(q, q);
        let mut b = DVector::zeros(q);
        for i in 0..n {
            for r in 0..q {
                let pr = psi[(i, r)] * w[i];
                b[r] += pr * self.y_rot[i];
                for c in 0..=r {
                    f[(r, c)] += pr * psi[(i, c)];
                }
            }
        }
        for r in 0..q {
            for c in 0..r {
                f[(c, r)] = f[(r, c)];
            }
        }
        let chol = nalgebra::Cholesky::new(f)
            .ok_or_else(|| Error::Identifiability("flat-block information matrix is singular".into()))?;
        let mean = chol.solve(&b);
        let cov = chol.inverse();
        Ok((mean, cov))
    }

    pub fn stage_one(&self, first: FirstStage) -> Result<StageOne> {
        let n = self.data.n();
        let p = self.data.p();
        let shrink = |k: f64| {
            DVector::from_iterator(
                n,
                self.eig
                    .values
                    .iter()
                    .zip(self.a_rot.iter())
                    .map(|(d, a)| d / (d + k) * a),
            )
        };
        match first {
            FirstStage::EmpiricalBayes => {
                let tau2 = eb_tau2_rotated(&self.eig.values, &self.a_rot, p, 1.0)?;
                Ok(StageOne {
                    a_hat_rot: shrink(p as f64 / tau2),
                    tau2: Some(tau2),
                })
            }
            FirstStage::Penalty(l1) => {
                check_penalty(l1)?;
                Ok(StageOne {
                    a_hat_rot: shrink(n as f64 * l1),
                    tau2: None,
                })
            }
            FirstStage::Oracle => Ok(StageOne {
                a_hat_rot: self.eig.rotate(&self.data.oracle_values()?),
                tau2: None,
            }),
        }
    }

    fn flat_columns(&self, method: RidgeMethod, stage: Option<&StageOne>) -> Result<Vec<DVector<f64>>> {
        let need = || stage.ok_or_else(|| Error::arg("this ridge method needs a stage-one fit"));
        Ok(match method {
            RidgeMethod::Naive => vec![self.a_rot.clone()],
            RidgeMethod::Direct => vec![self.a_rot.clone(), need()?.a_hat_rot.clone()],
            RidgeMethod::Debiased => vec![&self.a_rot - &need()?.a_hat_rot],
        })
    }

    /// Log-likelihood of `Y` with the flat coefficients integrated out
    /// against a flat prior, at outcome penalty `λ` and noise `σ²`.
    pub fn restricted_loglik(
        &self,
        method: RidgeMethod,
        stage: Option<&StageOne>,
        scale: OutcomeScale,
    ) -> Result<f64> {
        check_penalty(scale.lambda)?;
        check_noise(scale.noise_var)?;
        let cols = self.flat_columns(method, stage)?;
        Ok(self.restricted_loglik_cols(&cols, 1.0 / (self.data.n() as f64 * scale.lambda), scale.noise_var))
    }

    fn restricted_loglik_cols(&self, cols: &[DVector<f64>], t: f64, s2: f64) -> f64 {
        let q = cols.len();
        let mut f = DMatrix::zeros(q, q);
        let mut b = DVector::zeros(q);
        let mut ll = 0.0;
        let mut yy = 0.0;
        for (i, d) in self.eig.values.iter().enumerate() {
            let v = s2 + d * t;
            let w = 1.0 / v;
            ll -= 0.5 * v.ln();
            yy += w * self.y_rot[i] * self.y_rot[i];
            for r in 0..q {
                b[r] += w * cols[r][i] * self.y_rot[i];
                for c in 0..=r {
                    f[(r, c)] += w * cols[r][i] * cols[c][i];
                }
            }
        }
        for r in 0..q {
            for c in 0..r {
                f[(c, r)] = f[(r, c)];
            }
        }
        let Some(chol) = nalgebra::Cholesky::new(f) else {
            return f64::NEG_INFINITY;
        };
        let fb = chol.solve(&b);
        ll - 0.5 * crate::linalg::chol_logdet(&chol) - 0.5 * (yy - b.dot(&fb))
    }

    /// Empirical-Bayes outcome penalty and noise variance maximizing
    /// [`Self::restricted_loglik`]: log-grid over the total signal variance
    /// `P/(Nλ)` and `σ²`, then Nelder–Mead.
    pub fn eb_outcome_scale(&self, method: RidgeMethod, stage: Option<&StageOne>) -> Result<OutcomeScale> {
        let cols = self.flat_columns(method, stage)?;
        let mut psi = DMatrix::zeros(self.data.n(), cols.len());
        for (j, c) in cols.iter().enumerate() {
            psi.set_column(j, c);
        }
        check_flat_rank(&psi)?;
        let p = self.data.p() as f64;
        let f = |v: &[f64]| {
            if v.iter().all(|x| x.abs() <= OUTCOME_LOG_BOUND) {
                self.restricted_loglik_cols(&cols, v[0].exp() / p, v[1].exp())
            } else {
                f64::NEG_INFINITY
            }
        };
        let mut best = (f64::NEG_INFINITY, [0.0, 0.0]);
        for i in -6..=6 {
            for j in -4..=4 {
                let v = [0.5 * i as f64 * std::f64::consts::LN_10, 0.5 * j as f64 * std::f64::consts::LN_10];
                let ll = f(&v);
                if ll > best.0 {
                    best = (ll, v);
                }
            }
        }
        if !best.0.is_finite() {
            return Err(Error::Numeric("outcome marginal likelihood is not finite on the grid".into()));
        }
        let (x, ll) = crate::optim::nelder_mead_max(&f, &best.1, 0.5, 1e-9, 400);
        let v = if ll >= best.0 { [x[0], x[1]] } else { best.1 };
        Ok(OutcomeScale {
            lambda: p / (self.data.n() as f64 * v[0].exp()),
            noise_var: v[1].exp(),
        })
    }

    /// Fit `method` at the given outcome scale.
    pub fn fit(
        &self,
        method: RidgeMethod,
        stage: Option<&StageOne>,
        scale: OutcomeScale,
        level: f64,
    ) -> Result<EstimatorResult> {
        let opts = RidgeOptions {
            noise_var: scale.noise_var,
            level,
            first_stage: FirstStage::EmpiricalBayes,
        };
        let need = || stage.ok_or_else(|| Error::arg("this ridge method needs a stage-one fit"));
        match method {
            RidgeMethod::Naive => self.naive(scale.lambda, &opts),
            RidgeMethod::Direct => self.direct(scale.lambda, &opts, need()?),
            RidgeMethod::Debiased => self.debiased(scale.lambda, &opts, need()?),
        }
    }

    /// Design `[A, X]`, flat prior on `γ`.
    pub fn naive(&self, lambda: f64, opts: &RidgeOptions) -> Result<EstimatorResult> {
        let (mean, cov) = self.flat_posterior(&[&self.a_rot], lambda, opts.noise_var)?;
        EstimatorResult::gaussian("naive", mean[0], cov[(0, 0)].sqrt(), opts.level)
    }

    /// Design `[A, Â, X]`, flat priors on `γ` and `ω`.
    pub fn direct(&self, lambda: f64, opts: &RidgeOptions, stage: &StageOne) -> Result<EstimatorResult> {
        let (mean, cov) = self.flat_posterior(&[&self.a_rot, &stage.a_hat_rot], lambda, opts.noise_var)?;
        let mut r = EstimatorResult::gaussian("direct", mean[0], cov[(0, 0)].sqrt(), opts.level)?
            .with_diagnostic("omega_hat", mean[1])
            .with_diagnostic("omega_sd", cov[(1, 1)].sqrt());
        if let Some(t) = stage.tau2 {
            r = r.with_diagnostic("tau2_hat", t);
        }
        Ok(r)
    }

    /// Design `[A - Â, X]`, flat prior on the residual coefficient.
    pub fn debiased(&self, lambda: f64, opts: &RidgeOptions, stage: &StageOne) -> Result<EstimatorResult> {
        let resid = &self.a_rot - &stage.a_hat_rot;
        let (mean, cov) = self.flat_posterior(&[&resid], lambda, opts.noise_var)?;
        let mut r = EstimatorResult::gaussian("debiased", mean[0], cov[(0, 0)].sqrt(), opts.level)?;
        if let Some(t) = stage.tau2 {
            r = r.with_diagnostic("tau2_hat", t);
        }
        Ok(r)
    }

    /// The clever covariate in the original coordinates.
    pub fn clever_covariate(&self, stage: &StageOne) -> DVector<f64> {
        &self.eig.vectors * &stage.a_hat_rot
    }
}

fn check_penalty(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::arg(format!("ridge penalty must be positive, got {lambda}")))
    }
}

/// Ridge fit on `[A, X]` with `β ~ Normal(0, (Nλ)⁻¹ I)` and a flat prior on `γ`.
pub fn fit_naive_ridge(data: &Dataset, lambda: f64, noise_var: f64) -> Result<EstimatorResult> {
    let opts = RidgeOptions {
        noise_var,
        ..RidgeOptions::default()
    };
    RidgeContext::new(data).naive(lambda, &opts)
}

/// Two-stage Z-prior fit with an empirical-Bayes first stage.
pub fn fit_direct_zprior(data: &Dataset, lambda: f64) -> Result<EstimatorResult> {
    fit_direct_zprior_with(data, lambda, &RidgeOptions::default())
}

pub fn fit_direct_zprior_with(data: &Dataset, lambda: f64, opts: &RidgeOptions) -> Result<EstimatorResult> {
    let ctx = RidgeContext::new(data);
    let stage = ctx.stage_one(opts.first_stage)?;
    ctx.direct(lambda, opts, &stage)
}

/// Residualized-exposure fit, equivalent to fixing `ω = -γ`.
pub fn fit_debiased(data: &Dataset, lambda: f64) -> Result<EstimatorResult> {
    fit_debiased_with(data, lambda, &RidgeOptions::default())
}

pub fn fit_debiased_with(data: &Dataset, lambda: f64, opts: &RidgeOptions) -> Result<EstimatorResult> {
    let ctx = RidgeContext::new(data);
    let stage = ctx.stage_one(opts.first_stage)?;
    ctx.debiased(lambda, opts, &stage)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_prior_is_ols() {
        let x = DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]);
        let y = DVector::from_row_slice(&[2.0, 4.1, 5.9, 8.0]);
        let post = ridge_posterior(&x, &y, &[0.0], 0.5).unwrap();
        let sxx = 30.0;
        let sxy = 2.0 + 8.2 + 17.7 + 32.0;
        assert!((post.mean[0] - sxy / sxx).abs() < 1e-12);
        assert!((post.covariance[(0, 0)] - 0.5 / sxx).abs() < 1e-12);
    }

    #[test]
    fn intercept_with_penalty() {
        let n = 5;
        let ones = DMatrix::from_element(n, 1, 1.0);
        let y = DVector::from_row_slice(&[1.0, 2.0, 0.5, 3.0, 1.5]);
        let ybar = y.mean();
        let (k, s2) = (2.0, 0.7);
        let post = ridge_posterior(&ones, &y, &[k], s2).unwrap();
        let expected = n as f64 * ybar / (n as f64 + s2 * k);
        assert!((post.mean[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn rank_deficient_flat_block() {
        let d = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let y = DVector::from_row_slice(&[1.0, 2.0, 3.0]);
        assert!(matches!(
            ridge_posterior(&d, &y, &[0.0, 0.0], 1.0),
            Err(Error::Identifiability(_))
        ));
        assert!(ridge_posterior(&d, &y, &[0.0, 1.0], 1.0).is_ok());
    }
}
