//! Partially linear GP regression with a continuous exposure:
//! `Y = r_y(X) + γA (+ ω r̂_a(X)) + ε`, `r_y ~ GP(0, 2ρ)`,
//! `ρ(x, x') = exp(-‖x - x'‖²)`, unit noise and `Normal(0, 10²)` priors on
//! the linear coefficients. `r̂_a` is a GP pilot fit of `A` on `X`.

use nalgebra::{DMatrix, DVector};

use super::{assemble, eb_search, gaussian_fit, EbAxes, LINEAR_SCALE};
use crate::error::{Error, Result};
use crate::estimators::{Dataset, EstimatorResult, GaussianPosterior, DEFAULT_LEVEL};
use crate::linalg;

/// Prior variance of the nuisance surface is `NUISANCE_SCALE · ρ`.
pub const NUISANCE_SCALE: f64 = 2.0;
pub const NOISE_VAR: f64 = 1.0;
const MIN_N: usize = 20;

/// Pairwise squared Euclidean distances between rows of `x`.
pub fn row_sq_distances(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let norms: Vec<f64> = (0..n).map(|i| x.row(i).norm_squared()).collect();
    let g = x * x.transpose();
    DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { (norms[i] + norms[j] - 2.0 * g[(i, j)]).max(0.0) })
}

/// `ρ(X, X)` scaled by `scale`.
fn rbf_gram(sqdist: &DMatrix<f64>, scale: f64) -> DMatrix<f64> {
    sqdist.map(|d| scale * (-d).exp())
}

/// Pilot posterior mean of `r_a` at the training points: GP of `A` on `X`
/// with kernel `100 + λρ(x, x')` and empirical-Bayes `(λ, ε)`.
pub fn pilot_exposure_fit(x: &DMatrix<f64>, a: &DVector<f64>) -> Result<DVector<f64>> {
    let n = x.nrows();
    let sq = row_sq_distances(x);
    let fixed = DMatrix::from_element(n, n, LINEAR_SCALE);
    let choice = eb_search(&fixed, Some(&sq), a, EbAxes::fixed_bandwidth(1.0))?;
    let eps2 = choice.noise_sd * choice.noise_sd;
    let c = assemble(&fixed, Some(&sq), choice.amplitude, choice.inv_bandwidth, eps2);
    let g = gaussian_fit(&c, a)?;
    // E[f | A] = (C - ε²I) C⁻¹ A = A - ε² α
    let r_hat = a - g.alpha * eps2;
    let m = r_hat.mean();
    let var = r_hat.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64;
    if !(var.sqrt() > 1e-9 * (1.0 + m.abs())) {
        return Err(Error::DegeneratePilot);
    }
    Ok(r_hat)
}

/// Posterior of `θ` in `y = Bθ + f + e`, `f ~ N(0, K)`, `e ~ N(0, σ²I)`,
/// `θ ~ N(0, prior_var · I)`, with `f` integrated out.
pub fn gp_plus_linear_posterior(
    b: &DMatrix<f64>,
    k: &DMatrix<f64>,
    noise_var: f64,
    prior_var: f64,
    y: &DVector<f64>,
) -> Result<GaussianPosterior> {
    let n = y.len();
    if b.nrows() != n || k.shape() != (n, n) {
        return Err(Error::arg("gp_plus_linear_posterior: dimension mismatch"));
    }
    if !(noise_var > 0.0 && prior_var > 0.0) {
        return Err(Error::arg("variances must be positive"));
    }
    let mut c = k.clone();
    for i in 0..n {
        c[(i, i)] += noise_var;
    }
    let (chol, _) = linalg::cholesky_jittered(&c)?;
    let cinv_b = chol.solve(b);
    let cinv_y = chol.solve(y);
    let mut prec = b.transpose() * &cinv_b;
    for i in 0..prec.nrows() {
        prec[(i, i)] += 1.0 / prior_var;
    }
    let prec = linalg::cholesky_jittered(&prec)?.0;
    let cov = prec.inverse();
    let mean = &cov * (b.transpose() * cinv_y);
    Ok(GaussianPosterior {
        mean,
        covariance: cov,
        noise_var,
        labels: vec![String::new(); b.ncols()],
    })
}

fn check(data: &Dataset) -> Result<()> {
    if data.n() < MIN_N {
        return Err(Error::InsufficientSample { got: data.n(), need: MIN_N });
    }
    Ok(())
}

fn summarize(method: &str, post: &GaussianPosterior) -> Result<EstimatorResult> {
    EstimatorResult::gaussian(method, post.mean[0], post.sd(0), DEFAULT_LEVEL)
}

/// `Y = r_y(X) + γA + ε` ignoring the exposure mechanism.
pub fn fit_semipar_naive(data: &Dataset) -> Result<EstimatorResult> {
    check(data)?;
    let k = rbf_gram(&row_sq_distances(&data.x), NUISANCE_SCALE);
    let b = DMatrix::from_column_slice(data.n(), 1, data.a.as_slice());
    let post = gp_plus_linear_posterior(&b, &k, NOISE_VAR, LINEAR_SCALE, &data.y)?.with_labels(&["gamma"]);
    summarize("naive", &post)
}

/// `Y = r_y(X) + ω r̂_a(X) + γA + ε` with a pilot GP estimate of `r_a`.
pub fn fit_semipar_direct(data: &Dataset) -> Result<EstimatorResult> {
    check(data)?;
    let r_hat = pilot_exposure_fit(&data.x, &data.a)?;
    let k = rbf_gram(&row_sq_distances(&data.x), NUISANCE_SCALE);
    let b = DMatrix::from_fn(data.n(), 2, |i, j| if j == 0 { data.a[i] } else { r_hat[i] });
    let post = gp_plus_linear_posterior(&b, &k, NOISE_VAR, LINEAR_SCALE, &data.y)?.with_labels(&["gamma", "omega"]);
    Ok(summarize("direct", &post)?
        .with_diagnostic("omega_hat", post.mean[1])
        .with_diagnostic("omega_sd", post.sd(1)))
}
