//! Data-generating processes for the five simulation studies.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::estimators::Dataset;
use crate::gp::semipar::row_sq_distances;
use crate::linalg;
use crate::rng;
use crate::stats;

/// Ground truth for one simulated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    /// The estimand: `γ`, or the sample ATE for the GP study.
    pub target: f64,
    pub params: BTreeMap<String, f64>,
    pub beta: Option<DVector<f64>>,
    pub phi: Option<DVector<f64>>,
}

impl Truth {
    fn new(target: f64) -> Self {
        Truth {
            target,
            params: BTreeMap::new(),
            beta: None,
            phi: None,
        }
    }

    fn with(mut self, key: &str, v: f64) -> Self {
        self.params.insert(key.to_string(), v);
        self
    }
}

fn linear_oracle(phi: &DVector<f64>) -> crate::selection_bias::Surface {
    let phi = phi.clone();
    Arc::new(move |x: &[f64]| x.iter().zip(phi.iter()).map(|(a, b)| a * b).sum())
}

/// `A = Xφ + ν`, `Y = Xβ + γA + ε`, unit noise variances.
fn linear_dataset(x: DMatrix<f64>, beta: &DVector<f64>, phi: &DVector<f64>, gamma: f64, s: &mut rng::Stream) -> Result<Dataset> {
    let n = x.nrows();
    let a = &x * phi + linalg::normal_vector(n, s);
    let y = &x * beta + &a * gamma + linalg::normal_vector(n, s);
    Ok(Dataset::new(x, a, y)?.with_oracle(linear_oracle(phi)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RidgeSetting {
    /// `γ, ω ~ Normal(0, 1)`
    Random,
    /// `γ = 2`, `ω = -1/2`
    Fixed,
    /// `γ = 2`, `ω = -2`
    Debiased,
    /// `γ = 2`, `ω = 0`
    Naive,
}

impl RidgeSetting {
    pub const ALL: [RidgeSetting; 4] = [RidgeSetting::Random, RidgeSetting::Fixed, RidgeSetting::Debiased, RidgeSetting::Naive];

    pub fn tag(self) -> &'static str {
        match self {
            RidgeSetting::Random => "random",
            RidgeSetting::Fixed => "fixed",
            RidgeSetting::Debiased => "debiased",
            RidgeSetting::Naive => "naive",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| Error::arg(format!("unknown ridge setting '{s}'")))
    }
}

/// Dense design: `φ = 1/√P`, `β = b + ωφ` with `b_j ~ Normal(0, 1/P)`,
/// `X_i ~ Normal(0, I)`.
pub fn dgp_ridge(setting: RidgeSetting, n: usize, p: usize, seed: u64) -> Result<(Dataset, Truth)> {
    if n < 2 || p < 2 {
        return Err(Error::arg("ridge design needs N, P >= 2"));
    }
    let mut s = rng::stream(seed);
    let (gamma, omega) = match setting {
        RidgeSetting::Random => (s.sample(StandardNormal), s.sample(StandardNormal)),
        RidgeSetting::Fixed => (2.0, -0.5),
        RidgeSetting::Debiased => (2.0, -2.0),
        RidgeSetting::Naive => (2.0, 0.0),
    };
    let sp = (p as f64).sqrt();
    let phi = DVector::from_element(p, 1.0 / sp);
    let b = linalg::normal_vector(p, &mut s) / sp;
    let beta = &b + &phi * omega;
    let x = linalg::normal_matrix(n, p, &mut s);
    let data = linear_dataset(x, &beta, &phi, gamma, &mut s)?;
    let mut truth = Truth::new(gamma).with("gamma", gamma).with("omega", omega);
    truth.beta = Some(beta);
    truth.phi = Some(phi);
    Ok((data, truth))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SasScheme {
    Naive,
    Shared,
    Direct,
    Both,
}

impl SasScheme {
    pub const ALL: [SasScheme; 4] = [SasScheme::Naive, SasScheme::Shared, SasScheme::Direct, SasScheme::Both];

    pub fn tag(self) -> &'static str {
        match self {
            SasScheme::Naive => "naive",
            SasScheme::Shared => "shared",
            SasScheme::Direct => "direct",
            SasScheme::Both => "both",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| Error::arg(format!("unknown sparse scheme '{s}'")))
    }
}

pub const SAS_INCLUSION: f64 = 5.0 / 200.0;
pub const SAS_DIM: usize = 200;

/// Sparse design at `N = P = 200`.
pub fn dgp_sas(scheme: SasScheme, seed: u64) -> Result<(Dataset, Truth)> {
    dgp_sas_sized(scheme, SAS_DIM, SAS_DIM, seed)
}

/// Sparse design: `φ_j` spike-and-slab with unit slab variance and inclusion
/// 5/200; `β` drawn per `scheme`; `γ = 1`.
pub fn dgp_sas_sized(scheme: SasScheme, n: usize, p: usize, seed: u64) -> Result<(Dataset, Truth)> {
    if n < 2 || p < 1 {
        return Err(Error::arg("sparse design needs N >= 2 and P >= 1"));
    }
    let mut s = rng::stream(seed);
    let slab = |s: &mut rng::Stream, prob: f64| -> f64 {
        let keep = s.random::<f64>() < prob;
        let v: f64 = s.sample(StandardNormal);
        if keep { v } else { 0.0 }
    };
    let phi = DVector::from_fn(p, |_, _| slab(&mut s, SAS_INCLUSION));
    let shared = matches!(scheme, SasScheme::Shared | SasScheme::Both);
    let mut beta = DVector::from_fn(p, |j, _| {
        let prob = if shared && phi[j] != 0.0 { 1.0 } else { SAS_INCLUSION };
        slab(&mut s, prob)
    });
    if matches!(scheme, SasScheme::Direct | SasScheme::Both) {
        beta -= &phi;
    }
    let x = linalg::normal_matrix(n, p, &mut s);
    let data = linear_dataset(x, &beta, &phi, 1.0, &mut s)?;
    let support = |v: &DVector<f64>| v.iter().filter(|b| **b != 0.0).count() as f64;
    let mut truth = Truth::new(1.0)
        .with("gamma", 1.0)
        .with("support_beta", support(&beta))
        .with("support_phi", support(&phi));
    truth.beta = Some(beta);
    truth.phi = Some(phi);
    Ok((data, truth))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GpSetting {
    pub nonlinear: bool,
    pub heterogeneous: bool,
}

impl GpSetting {
    pub fn tag(self) -> String {
        format!(
            "{}_{}",
            if self.nonlinear { "nonlinear" } else { "linear" },
            if self.heterogeneous { "hetero" } else { "homo" }
        )
    }

    pub fn parse(s: &str) -> Result<Self> {
        let (m, t) = s
            .split_once('_')
            .ok_or_else(|| Error::arg(format!("GP setting '{s}' is not of the form <mean>_<effect>")))?;
        let nonlinear = match m {
            "linear" => false,
            "nonlinear" => true,
            _ => return Err(Error::arg(format!("unknown GP mean '{m}'"))),
        };
        let heterogeneous = match t {
            "homo" => false,
            "hetero" => true,
            _ => return Err(Error::arg(format!("unknown GP effect '{t}'"))),
        };
        Ok(GpSetting { nonlinear, heterogeneous })
    }
}

fn g_level(x4: f64) -> f64 {
    match x4 as i64 {
        1 => 2.0,
        2 => -1.0,
        _ => -4.0,
    }
}

/// Prognostic surface `μ(x)` of the GP study.
pub fn gp_mu(nonlinear: bool, x: &[f64]) -> f64 {
    if nonlinear {
        -6.0 + g_level(x[3]) + 6.0 * (x[2] - 1.0).abs()
    } else {
        1.0 + g_level(x[3]) + x[0] * x[2]
    }
}

/// Treatment effect `τ(x)` of the GP study.
pub fn gp_tau(heterogeneous: bool, x: &[f64]) -> f64 {
    if heterogeneous { 1.0 + 2.0 * x[1] * x[4] } else { 3.0 }
}

/// Binary-exposure design with a known propensity
/// `φ(x) = 0.8Φ(3μ(x)/s - x₁/2) + 0.1`, `s` the sample SD of `μ(X_i)`.
pub fn dgp_gp(setting: GpSetting, n: usize, p: usize, seed: u64) -> Result<(Dataset, Truth)> {
    if p < 5 {
        return Err(Error::arg(format!("GP design needs P >= 5, got {p}")));
    }
    if n < 2 {
        return Err(Error::arg("GP design needs N >= 2"));
    }
    let mut s = rng::stream(seed);
    let mut x = linalg::normal_matrix(n, p, &mut s);
    for i in 0..n {
        x[(i, 1)] = f64::from(s.random::<f64>() < 0.5);
        x[(i, 3)] = f64::from(s.random_range(1u8..=3));
    }
    let rows: Vec<Vec<f64>> = (0..n).map(|i| x.row(i).iter().cloned().collect()).collect();
    let mu: Vec<f64> = rows.iter().map(|r| gp_mu(setting.nonlinear, r)).collect();
    let sd = stats::sd(&mu);
    if !(sd > 0.0) {
        return Err(Error::NumericalDegeneracy("prognostic score has zero sample variance".into()));
    }
    let nonlinear = setting.nonlinear;
    let oracle: crate::selection_bias::Surface =
        Arc::new(move |r: &[f64]| 0.8 * stats::normal_cdf(3.0 * gp_mu(nonlinear, r) / sd - 0.5 * r[0]) + 0.1);
    let mut a = DVector::zeros(n);
    let mut y = DVector::zeros(n);
    let mut tau_sum = 0.0;
    for i in 0..n {
        a[i] = f64::from(s.random::<f64>() < oracle(&rows[i]));
        let tau = gp_tau(setting.heterogeneous, &rows[i]);
        tau_sum += tau;
        let e: f64 = s.sample(StandardNormal);
        y[i] = mu[i] + a[i] * tau + e;
    }
    let ate = tau_sum / n as f64;
    let data = Dataset::new(x, a, y)?.with_oracle(oracle);
    Ok((data, Truth::new(ate).with("mu_sd", sd)))
}

/// `β = φ = (ΛΛᵀ + σ²I)⁺ Λ 1_L`, computed as `Λ (ΛᵀΛ + σ²I)⁺ 1_L`.
/// Returns the vector and the rank of the `L × L` system.
pub fn factor_coefficients(loadings: &DMatrix<f64>, sigma_x: f64) -> Result<(DVector<f64>, usize)> {
    let l = loadings.ncols();
    if l == 0 || l > loadings.nrows() {
        return Err(Error::arg("factor model needs 1 <= L <= P"));
    }
    if !(sigma_x >= 0.0 && sigma_x.is_finite()) {
        return Err(Error::arg("sigma_x must be nonnegative"));
    }
    let mut m = loadings.transpose() * loadings;
    for i in 0..l {
        m[(i, i)] += sigma_x * sigma_x;
    }
    let svd = m.svd(true, true);
    let tol = 1e-12 * svd.singular_values.max() * l as f64;
    let rank = svd.rank(tol);
    let pinv = svd
        .pseudo_inverse(tol)
        .map_err(|e| Error::Numeric(format!("pseudo-inverse failed: {e}")))?;
    Ok((loadings * (pinv * DVector::from_element(l, 1.0)), rank))
}

/// Latent factor design `X_i = Λη_i + σ_x ν_i` with `Λ_{pℓ} ~ Normal(0, 1)`,
/// `η_i ~ Normal(0, I_L)`, `β = φ` from [`factor_coefficients`], `γ = 1`.
pub fn dgp_factor(sigma_x: f64, n: usize, p: usize, l: usize, seed: u64) -> Result<(Dataset, Truth)> {
    if l == 0 || l > p {
        return Err(Error::arg(format!("factor model needs 1 <= L <= P, got L = {l}, P = {p}")));
    }
    if n < 2 {
        return Err(Error::arg("factor design needs N >= 2"));
    }
    let mut s = rng::stream(seed);
    let loadings = linalg::normal_matrix(p, l, &mut s);
    let eta = linalg::normal_matrix(n, l, &mut s);
    let x = &eta * loadings.transpose() + linalg::normal_matrix(n, p, &mut s) * sigma_x;
    let (beta, rank) = factor_coefficients(&loadings, sigma_x)?;
    let data = linear_dataset(x, &beta, &beta, 1.0, &mut s)?;
    let mut truth = Truth::new(1.0)
        .with("gamma", 1.0)
        .with("sigma_x", sigma_x)
        .with("rank", rank as f64);
    truth.phi = Some(beta.clone());
    truth.beta = Some(beta);
    Ok((data, truth))
}

/// Joint draw of a zero-mean GP with Gram matrix `k` at the design points.
fn gp_draw(k: &DMatrix<f64>, s: &mut rng::Stream) -> Result<DVector<f64>> {
    let (chol, _) = linalg::cholesky_jittered(k)?;
    Ok(linalg::mvn_from_factor(&chol.l(), s))
}

/// Covariates near a one-dimensional manifold: `X̃_i = Λ(η_i) + σ_x ε_i`
/// with each coordinate of `Λ` a GP with kernel `exp(-(η - η')²)`, columns
/// divided by their sample SD. Continuous exposure `A = r_a(X) + ν`, outcome
/// `Y = r*_y(X) + r_a(X) + γA + ε` with `r_a, r*_y` GPs with kernel
/// `exp(-‖x - x'‖²)` and `γ = 1`.
pub fn dgp_manifold(p: usize, sigma_x: f64, n: usize, seed: u64) -> Result<(Dataset, Truth)> {
    if n < 20 {
        return Err(Error::InsufficientSample { got: n, need: 20 });
    }
    if p < 1 || !(sigma_x >= 0.0 && sigma_x.is_finite()) {
        return Err(Error::arg("manifold design needs P >= 1 and sigma_x >= 0"));
    }
    let mut s = rng::stream(seed);
    let eta = linalg::normal_vector(n, &mut s);
    let k_eta = DMatrix::from_fn(n, n, |i, j| (-(eta[i] - eta[j]).powi(2)).exp());
    let (chol, _) = linalg::cholesky_jittered(&k_eta)?;
    let l = chol.l();
    let mut x = DMatrix::zeros(n, p);
    for j in 0..p {
        let col = linalg::mvn_from_factor(&l, &mut s);
        x.set_column(j, &col);
    }
    x += linalg::normal_matrix(n, p, &mut s) * sigma_x;
    for j in 0..p {
        let col: Vec<f64> = x.column(j).iter().cloned().collect();
        let sd = stats::sd(&col);
        if !(sd > 0.0) {
            return Err(Error::NumericalDegeneracy(format!("covariate {j} has zero sample variance")));
        }
        x.column_mut(j).scale_mut(1.0 / sd);
    }
    let k_x = row_sq_distances(&x).map(|d| (-d).exp());
    let r_a = gp_draw(&k_x, &mut s)?;
    let r_star = gp_draw(&k_x, &mut s)?;
    let gamma = 1.0;
    let a = &r_a + linalg::normal_vector(n, &mut s);
    let y = &r_star + &r_a + &a * gamma + linalg::normal_vector(n, &mut s);
    let data = Dataset::new(x, a, y)?;
    Ok((data, Truth::new(gamma).with("gamma", gamma).with("sigma_x", sigma_x)))
}
