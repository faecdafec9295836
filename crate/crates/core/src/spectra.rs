//! Random-matrix calculators.
//!
//! Everything here works from finite empirical spectra: the Stieltjes
//! transform and the `ψ_jk` moments are exact sums over eigenvalues, so the
//! closed-form bias curves can be checked directly against Monte Carlo at the
//! same `N` and `P`.
//!
//! Conventions: `F` is the spectrum of `X Xᵀ / N` (N eigenvalues) and `G` is
//! the companion spectrum of `Xᵀ X / N` (P eigenvalues, including the `P - N`
//! exact zeros when `P > N`).

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::linalg;

/// Relative tolerance for treating small negative eigenvalues as round-off.
pub const NEGATIVE_EIG_TOL: f64 = 1e-10;
/// Symmetry tolerance accepted by [`empirical_spectrum`].
pub const SYMMETRY_TOL: f64 = 1e-8;
/// Smallest ridge penalty accepted by [`zprior_ridge_bias`].
pub const ZPRIOR_MIN_PENALTY: f64 = 1e-3;
/// Denominators smaller than this are reported as degenerate.
pub const DEGENERATE_DENOMINATOR: f64 = 1e-12;

/// Eigenvalue multiset of a sample covariance with cached first two moments.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumSummary {
    eigenvalues: Vec<f64>,
    mean_eig: f64,
    mean_sq_eig: f64,
}

impl SpectrumSummary {
    /// Build from raw eigenvalues. Values in `[-tol·max(1, λ_max), 0)` are
    /// clamped to zero; anything more negative is rejected.
    pub fn from_eigenvalues(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::arg("spectrum must contain at least one eigenvalue"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("non-finite eigenvalue"));
        }
        let top = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let tol = NEGATIVE_EIG_TOL * top.max(1.0);
        for v in values.iter_mut() {
            if *v < 0.0 {
                if *v < -tol {
                    return Err(Error::arg(format!(
                        "eigenvalue {v:e} is negative beyond round-off; matrix is not PSD"
                    )));
                }
                *v = 0.0;
            }
        }
        values.sort_by(|a, b| b.total_cmp(a));
        let dim = values.len() as f64;
        let mean_eig = values.iter().sum::<f64>() / dim;
        let mean_sq_eig = values.iter().map(|v| v * v).sum::<f64>() / dim;
        Ok(SpectrumSummary {
            eigenvalues: values,
            mean_eig,
            mean_sq_eig,
        })
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `λ̃ = (1/dim) Σ λ_i`
    pub fn mean_eig(&self) -> f64 {
        self.mean_eig
    }

    /// `λ̄² = (1/dim) Σ λ_i²`
    pub fn mean_sq_eig(&self) -> f64 {
        self.mean_sq_eig
    }

    /// Same spectrum with `extra` zero eigenvalues appended.
    pub fn with_zeros(&self, extra: usize) -> Self {
        let mut v = self.eigenvalues.clone();
        v.extend(std::iter::repeat_n(0.0, extra));
        SpectrumSummary::from_eigenvalues(v).expect("zero padding keeps a valid spectrum")
    }

    /// Rescale every eigenvalue by `c > 0`.
    pub fn scaled(&self, c: f64) -> Self {
        SpectrumSummary::from_eigenvalues(self.eigenvalues.iter().map(|v| v * c).collect())
            .expect("positive rescaling keeps a valid spectrum")
    }

    fn mean_of(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.eigenvalues.iter().map(|&x| f(x)).sum::<f64>() / self.dim() as f64
    }
}

/// All eigenvalues of a symmetric PSD matrix, sorted nonincreasing.
pub fn empirical_spectrum(s: &DMatrix<f64>) -> Result<SpectrumSummary> {
    if !s.is_square() {
        return Err(Error::arg(format!(
            "matrix must be square, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::arg("matrix has non-finite entries"));
    }
    let asym = linalg::asymmetry(s);
    if asym > SYMMETRY_TOL {
        return Err(Error::arg(format!(
            "matrix is not symmetric (relative asymmetry {asym:e})"
        )));
    }
    let eig = SymmetricEigen::new(s.clone());
    SpectrumSummary::from_eigenvalues(eig.eigenvalues.iter().cloned().collect())
}

/// Spectra `(F, G)` of `X Xᵀ / N` and `Xᵀ X / N` for an `N × P` design.
///
/// Only the smaller Gram matrix is decomposed; the other spectrum shares its
/// nonzero eigenvalues and is padded with zeros.
pub fn sample_spectra(x: &DMatrix<f64>) -> Result<(SpectrumSummary, SpectrumSummary)> {
    let (n, p) = x.shape();
    let scale = 1.0 / n as f64;
    if n <= p {
        let f = empirical_spectrum(&((x * x.transpose()) * scale))?;
        let g = f.with_zeros(p - n);
        Ok((f, g))
    } else {
        let g = empirical_spectrum(&((x.transpose() * x) * scale))?;
        let f = g.with_zeros(n - p);
        Ok((f, g))
    }
}

fn check_penalty(lambda: f64) -> Result<()> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::arg(format!("lambda must be positive, got {lambda}")));
    }
    Ok(())
}

/// Stieltjes transform at `-λ`: `v(-λ) = (1/dim) Σ 1/(x_i + λ)`.
pub fn stieltjes(spec: &SpectrumSummary, lambda: f64) -> Result<f64> {
    check_penalty(lambda)?;
    Ok(spec.mean_of(|x| 1.0 / (x + lambda)))
}

/// `ψ_jk = (1/dim) Σ x_i^k / (x_i + λ)^j`, evaluated directly.
pub fn psi_moment(spec: &SpectrumSummary, j: i32, k: i32, lambda: f64) -> Result<f64> {
    check_psi_indices(j, k)?;
    check_penalty(lambda)?;
    Ok(spec.mean_of(|x| x.powi(k) / (x + lambda).powi(j)))
}

fn check_psi_indices(j: i32, k: i32) -> Result<()> {
    if j < 1 || k < 0 {
        return Err(Error::arg(format!(
            "psi_moment needs j >= 1 and k >= 0, got j={j}, k={k}"
        )));
    }
    Ok(())
}

/// Table of `ψ_jk` for `0 ≤ j ≤ j_max`, `0 ≤ k ≤ k_max` filled by the
/// recursion `ψ_jk = ψ_{j-1,k-1} - λ ψ_{j,k-1}`.
///
/// Seeds: `ψ_{j0} = (1/dim) Σ (x_i + λ)^{-j}` and the raw moments
/// `ψ_{0k} = (1/dim) Σ x_i^k`.
#[derive(Debug, Clone)]
pub struct PsiTable {
    lambda: f64,
    k_max: usize,
    values: Vec<f64>,
}

impl PsiTable {
    pub fn new(spec: &SpectrumSummary, lambda: f64, j_max: usize, k_max: usize) -> Result<Self> {
        check_penalty(lambda)?;
        let width = k_max + 1;
        let mut values = vec![0.0; (j_max + 1) * width];
        for k in 0..=k_max {
            values[k] = spec.mean_of(|x| x.powi(k as i32));
        }
        for j in 1..=j_max {
            values[j * width] = spec.mean_of(|x| (x + lambda).powi(-(j as i32)));
            for k in 1..=k_max {
                values[j * width + k] =
                    values[(j - 1) * width + k - 1] - lambda * values[j * width + k - 1];
            }
        }
        Ok(PsiTable {
            lambda,
            k_max,
            values,
        })
    }

    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.values[j * (self.k_max + 1) + k]
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

/// `ψ_jk` computed through [`PsiTable`]'s recursion.
pub fn psi_moment_recursive(spec: &SpectrumSummary, j: i32, k: i32, lambda: f64) -> Result<f64> {
    check_psi_indices(j, k)?;
    let table = PsiTable::new(spec, lambda, j as usize, k as usize)?;
    Ok(table.get(j as usize, k as usize))
}

/// Support `(a, b) = (1 ∓ r^{-1/2})²` of the Marchenko–Pastur law used here.
pub fn mp_support(r: f64) -> Result<(f64, f64)> {
    if !(r >= 1.0) || !r.is_finite() {
        return Err(Error::UnsupportedRegime(format!(
            "Marchenko-Pastur density is only provided for r >= 1, got r={r}"
        )));
    }
    let s = (1.0 / r).sqrt();
    Ok(((1.0 - s).powi(2), (1.0 + s).powi(2)))
}

/// Marchenko–Pastur density on `(a, b) = (1 ∓ r^{-1/2})²`, normalized to
/// integrate to one:
/// `q(x) = r √((b - x)(x - a)) / (2π x)`.
///
/// This is the limiting eigenvalue law of `X Xᵀ / P` for an `N × P` design
/// with iid unit-variance entries and `P / N → r`. The spectrum `F` of
/// `X Xᵀ / N` is the same law dilated by `r`.
pub fn mp_density(r: f64, x: f64) -> Result<f64> {
    let (a, b) = mp_support(r)?;
    if !(x > a && x < b) {
        return Ok(0.0);
    }
    Ok(r * ((b - x) * (x - a)).sqrt() / (2.0 * std::f64::consts::PI * x))
}

/// Probability mass the Marchenko–Pastur law assigns to `[lo, hi]`.
///
/// Integrates in the angle `x = c + h cos θ`, which removes the square-root
/// endpoint singularities, with 64-point Gauss–Legendre.
pub fn mp_mass(r: f64, lo: f64, hi: f64) -> Result<f64> {
    let (a, b) = mp_support(r)?;
    let lo = lo.max(a);
    let hi = hi.min(b);
    if hi <= lo {
        return Ok(0.0);
    }
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let theta_of = |x: f64| ((x - c) / h).clamp(-1.0, 1.0).acos();
    let (t0, t1) = (theta_of(hi), theta_of(lo));
    // dx = -h sin θ dθ and √((b-x)(x-a)) = h sin θ
    let integrand = |t: f64| {
        let x = c + h * t.cos();
        let s = t.sin();
        r * h * h * s * s / (2.0 * std::f64::consts::PI * x)
    };
    Ok(crate::quad::gauss_legendre(integrand, t0, t1, 64))
}

/// One histogram bin: the share of eigenvalues in `[lo, hi)` next to the
/// Marchenko–Pastur mass of the same interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpBin {
    pub lo: f64,
    pub hi: f64,
    pub empirical: f64,
    pub theoretical: f64,
}

/// Histogram of `eigs` with `bins` equal bins over the support of the law of
/// `X Xᵀ / P`. The last bin is closed; eigenvalues outside the support only
/// count in the denominator.
pub fn mp_histogram(eigs: &[f64], r: f64, bins: usize) -> Result<Vec<MpBin>> {
    if bins == 0 || eigs.is_empty() {
        return Err(Error::arg("histogram needs at least one bin and one eigenvalue"));
    }
    let (a, b) = mp_support(r)?;
    let w = (b - a) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &x in eigs {
        if x >= a && x <= b {
            let k = (((x - a) / w) as usize).min(bins - 1);
            counts[k] += 1;
        }
    }
    let total = eigs.len() as f64;
    (0..bins)
        .map(|k| {
            let lo = a + k as f64 * w;
            let hi = if k + 1 == bins { b } else { lo + w };
            Ok(MpBin {
                lo,
                hi,
                empirical: counts[k] as f64 / total,
                theoretical: mp_mass(r, lo, hi)?,
            })
        })
        .collect()
}

/// `Σ |empirical - theoretical|` over the bins.
pub fn mp_l1_distance(bins: &[MpBin]) -> f64 {
    bins.iter().map(|b| (b.empirical - b.theoretical).abs()).sum()
}

/// Inputs to the closed-form bias curves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasInputs {
    /// Ridge penalty `λ`; the outcome prior is `β ~ Normal(0, (Nλ)⁻¹ I)`.
    pub ridge_penalty: f64,
    /// Signal-to-aspect ratio `η = r / τ²`.
    pub eta: f64,
    /// `r = P / N`.
    pub aspect_ratio: f64,
    /// Selection shift `ω₀` of the random-effects model.
    pub omega0: f64,
    /// Coefficient scale `τ²`.
    pub tau2: f64,
}

impl BiasInputs {
    /// Inputs with `η` derived as `r / τ²`.
    pub fn new(ridge_penalty: f64, aspect_ratio: f64, tau2: f64, omega0: f64) -> Result<Self> {
        check_penalty(ridge_penalty)?;
        if !(aspect_ratio > 0.0) || !(tau2 > 0.0) {
            return Err(Error::arg("aspect ratio and tau2 must be positive"));
        }
        if !omega0.is_finite() {
            return Err(Error::arg("omega0 must be finite"));
        }
        Ok(BiasInputs {
            ridge_penalty,
            eta: aspect_ratio / tau2,
            aspect_ratio,
            omega0,
            tau2,
        })
    }

    /// Inputs specified through `η` directly; `τ²` becomes `r / η`.
    pub fn from_eta(ridge_penalty: f64, aspect_ratio: f64, eta: f64, omega0: f64) -> Result<Self> {
        if !(eta > 0.0) {
            return Err(Error::arg(format!("eta must be positive, got {eta}")));
        }
        Self::new(ridge_penalty, aspect_ratio, aspect_ratio / eta, omega0)
    }

    pub fn with_penalty(mut self, ridge_penalty: f64) -> Self {
        self.ridge_penalty = ridge_penalty;
        self
    }
}

/// Asymptotic bias of the naive ridge estimator of `γ` (flat prior on `γ`,
/// `β ~ Normal(0, (Nλ)⁻¹ I)`):
///
/// `ω₀ (1 - λ v(-λ)) / (1 - (λ - η) v(-λ))`
///
/// with `v` the Stieltjes transform of `spec_f`, the spectrum of `X Xᵀ / N`.
pub fn naive_ridge_bias(spec_f: &SpectrumSummary, inputs: &BiasInputs) -> Result<f64> {
    let lambda = inputs.ridge_penalty;
    let v = stieltjes(spec_f, lambda)?;
    if !(inputs.eta > 0.0) {
        return Err(Error::arg("eta must be positive"));
    }
    let den = 1.0 - (lambda - inputs.eta) * v;
    if den.abs() <= DEGENERATE_DENOMINATOR {
        return Err(Error::NumericalDegeneracy(format!(
            "naive ridge bias denominator {den:e} at lambda={lambda}"
        )));
    }
    Ok(inputs.omega0 * (1.0 - lambda * v) / den)
}

/// Integral form of [`naive_ridge_bias`]:
/// `ω₀ ∫ x/(x+λ) dF / ∫ (x+η)/(x+λ) dF`.
pub fn naive_ridge_bias_integral(spec_f: &SpectrumSummary, inputs: &BiasInputs) -> Result<f64> {
    let lambda = inputs.ridge_penalty;
    check_penalty(lambda)?;
    let eta = inputs.eta;
    let num = spec_f.mean_of(|x| x / (x + lambda));
    let den = spec_f.mean_of(|x| (x + eta) / (x + lambda));
    if den.abs() <= DEGENERATE_DENOMINATOR {
        return Err(Error::NumericalDegeneracy(format!(
            "naive ridge bias denominator {den:e}"
        )));
    }
    Ok(inputs.omega0 * num / den)
}

/// The `ψ_jk` values entering [`zprior_ridge_bias`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZPriorPsi {
    pub psi10: f64,
    pub psi11: f64,
    pub psi21: f64,
    pub psi22: f64,
    pub psi32: f64,
    pub psi33: f64,
}

impl ZPriorPsi {
    pub fn from_table(t: &PsiTable) -> Self {
        ZPriorPsi {
            psi10: t.get(1, 0),
            psi11: t.get(1, 1),
            psi21: t.get(2, 1),
            psi22: t.get(2, 2),
            psi32: t.get(3, 2),
            psi33: t.get(3, 3),
        }
    }

    pub fn direct(spec_g: &SpectrumSummary, lambda: f64) -> Result<Self> {
        Ok(ZPriorPsi {
            psi10: psi_moment(spec_g, 1, 0, lambda)?,
            psi11: psi_moment(spec_g, 1, 1, lambda)?,
            psi21: psi_moment(spec_g, 2, 1, lambda)?,
            psi22: psi_moment(spec_g, 2, 2, lambda)?,
            psi32: psi_moment(spec_g, 3, 2, lambda)?,
            psi33: psi_moment(spec_g, 3, 3, lambda)?,
        })
    }
}

/// Asymptotic bias of the two-stage Z-prior estimator where the clever
/// covariate `X φ̂` comes from a ridge fit of `A` on `X` and the outcome
/// model puts flat priors on `(γ, ω)` and `Normal(0, (Nλ)⁻¹ I)` on `b`;
/// both stages use the same penalty `λ`.
///
/// With `ψ_jk` taken over `G` (spectrum of `Xᵀ X / N`, zeros included) and
/// `D = ψ32 + ψ33/η`, `C = ψ21 + ψ22/η`:
///
/// ```text
///            ω₀ λ [ψ11/η - (ψ22/η) C / D]
/// bias = -------------------------------------
///        (1-r)/r + λ [ψ10 + ψ11/η - C² / D]
/// ```
pub fn zprior_ridge_bias(spec_g: &SpectrumSummary, inputs: &BiasInputs) -> Result<f64> {
    let r = inputs.aspect_ratio;
    if !(r > 1.0) {
        return Err(Error::UnsupportedRegime(format!(
            "Z-prior bias formula requires r > 1, got r={r}"
        )));
    }
    let lambda = inputs.ridge_penalty;
    check_penalty(lambda)?;
    if lambda < ZPRIOR_MIN_PENALTY {
        return Err(Error::OutOfDomain(format!(
            "Z-prior bias is ill-behaved near zero; lambda={lambda:e} < {ZPRIOR_MIN_PENALTY:e}"
        )));
    }
    let table = PsiTable::new(spec_g, lambda, 3, 3)?;
    zprior_bias_from_psi(&ZPriorPsi::from_table(&table), inputs)
}

/// [`zprior_ridge_bias`] evaluated from precomputed `ψ` values.
pub fn zprior_bias_from_psi(psi: &ZPriorPsi, inputs: &BiasInputs) -> Result<f64> {
    let (lambda, eta, r) = (inputs.ridge_penalty, inputs.eta, inputs.aspect_ratio);
    let c = psi.psi21 + psi.psi22 / eta;
    let d = psi.psi32 + psi.psi33 / eta;
    if d.abs() <= DEGENERATE_DENOMINATOR {
        return Err(Error::NumericalDegeneracy(format!(
            "Z-prior inner denominator {d:e}"
        )));
    }
    let num = inputs.omega0 * lambda * (psi.psi11 / eta - (psi.psi22 / eta) * c / d);
    let den = (1.0 - r) / r + lambda * (psi.psi10 + psi.psi11 / eta - c * c / d);
    if den.abs() <= DEGENERATE_DENOMINATOR {
        return Err(Error::NumericalDegeneracy(format!(
            "Z-prior bias denominator {den:e} at lambda={lambda}"
        )));
    }
    Ok(num / den)
}

/// Limit of the selection bias `Δ(1)` under the random-effects model:
/// `ω₀ τ² λ̃ / (1 + τ² λ̃)`.
pub fn delta_limit(omega0: f64, tau2: f64, mean_eig: f64) -> Result<f64> {
    if !(tau2 > 0.0) || !(mean_eig > 0.0) {
        return Err(Error::arg("tau2 and mean_eig must be positive"));
    }
    let s = tau2 * mean_eig;
    Ok(omega0 * s / (1.0 + s))
}
