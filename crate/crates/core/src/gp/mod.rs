//! Gaussian-process regression of `Y` on `(A, X)` with kernels that do or
//! do not adjust for a known propensity score, empirical-Bayes
//! hyperparameters, and exact posteriors for average treatment effects.
//! The [`semipar`] submodule holds the continuous-exposure two-stage fit.

pub mod semipar;
mod spline;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::estimators::{Dataset, EstimatorResult, DEFAULT_LEVEL};
use crate::linalg;
use crate::selection_bias::Surface;

pub use spline::SplineBasis;

/// Prior variance of the parametric (linear) block of every kernel.
pub const LINEAR_SCALE: f64 = 100.0;
pub const DEFAULT_KNOTS: usize = 10;
/// Propensities are clipped to this range before inverse weighting.
pub const PROPENSITY_CLIP: (f64, f64) = (0.01, 0.99);

/// Log-grid for each empirical-Bayes axis.
const EB_GRID: [f64; 5] = [1e-2, 1e-1, 1.0, 1e1, 1e2];
/// Hyperparameters are kept inside `[1e-6, 1e6]` during refinement.
const LOG_BOUND: f64 = 13.815_510_557_964_274;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum KernelVariant {
    /// `100(1 + aa') + λ exp(-b‖(a,x) - (a',x')‖²)`
    Naive,
    /// Adds inverse-propensity covariates `w = a/φ`, `z = (1-a)/(1-φ)` to the linear block.
    Ipw,
    /// Spline-of-propensity linear block only.
    Sop,
    /// Spline-of-propensity linear block plus the Gaussian term.
    SopGp,
}

impl KernelVariant {
    pub const ALL: [KernelVariant; 4] = [KernelVariant::Naive, KernelVariant::Ipw, KernelVariant::Sop, KernelVariant::SopGp];

    pub fn tag(self) -> &'static str {
        match self {
            KernelVariant::Naive => "naive",
            KernelVariant::Ipw => "ipw",
            KernelVariant::Sop => "sop",
            KernelVariant::SopGp => "sop_gp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(KernelVariant::Naive),
            "ipw" => Ok(KernelVariant::Ipw),
            "sop" => Ok(KernelVariant::Sop),
            "sop_gp" => Ok(KernelVariant::SopGp),
            other => Err(Error::arg(format!("unknown GP kernel '{other}'"))),
        }
    }

    pub fn has_gaussian(self) -> bool {
        self != KernelVariant::Sop
    }

    pub fn uses_propensity(self) -> bool {
        self != KernelVariant::Naive
    }

    fn uses_spline(self) -> bool {
        matches!(self, KernelVariant::Sop | KernelVariant::SopGp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub variant: KernelVariant,
    /// `λ_k`
    pub amplitude: f64,
    /// `b`
    pub inv_bandwidth: f64,
    pub knots: usize,
}

impl KernelSpec {
    pub fn new(variant: KernelVariant, amplitude: f64, inv_bandwidth: f64) -> Self {
        KernelSpec {
            variant,
            amplitude,
            inv_bandwidth,
            knots: DEFAULT_KNOTS,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.amplitude > 0.0 && self.amplitude.is_finite())
            || !(self.inv_bandwidth > 0.0 && self.inv_bandwidth.is_finite())
        {
            return Err(Error::arg("kernel hyperparameters must be positive"));
        }
        if self.variant.uses_spline() && self.knots < 2 {
            return Err(Error::arg("spline kernels need at least 2 knots"));
        }
        Ok(())
    }
}

/// One kernel input `(a, x, φ(x))`.
#[derive(Debug, Clone, Copy)]
pub struct GpPoint<'a> {
    pub a: f64,
    pub x: &'a [f64],
    pub phi: Option<f64>,
}

/// Linear-block features of a point and whether its propensity was clipped.
fn features(variant: KernelVariant, u: &GpPoint, spline: Option<&SplineBasis>) -> Result<(Vec<f64>, bool)> {
    let mut f = vec![1.0, u.a];
    let mut clipped = false;
    if variant.uses_propensity() {
        let phi = u
            .phi
            .ok_or_else(|| Error::arg(format!("kernel '{}' needs a propensity value", variant.tag())))?;
        match variant {
            KernelVariant::Ipw => {
                if !(phi > 0.0 && phi < 1.0) {
                    return Err(Error::NumericalDegeneracy(format!(
                        "propensity {phi} outside (0, 1) in inverse weighting"
                    )));
                }
                let c = phi.clamp(PROPENSITY_CLIP.0, PROPENSITY_CLIP.1);
                clipped = c != phi;
                f.push(u.a / c);
                f.push((1.0 - u.a) / (1.0 - c));
            }
            _ => {
                let basis = spline.ok_or_else(|| Error::arg("spline kernels need a fitted spline basis"))?;
                f.extend(basis.eval(phi));
            }
        }
    }
    Ok((f, clipped))
}

fn sq_dist(u: &GpPoint, v: &GpPoint) -> f64 {
    let da = u.a - v.a;
    da * da + u.x.iter().zip(v.x).map(|(p, q)| (p - q) * (p - q)).sum::<f64>()
}

/// `κ(u, u')` for the given kernel.
pub fn kernel_eval(spec: &KernelSpec, u: &GpPoint, v: &GpPoint, spline: Option<&SplineBasis>) -> Result<f64> {
    spec.validate()?;
    if u.x.len() != v.x.len() {
        return Err(Error::arg("kernel inputs have different covariate dimensions"));
    }
    let (fu, _) = features(spec.variant, u, spline)?;
    let (fv, _) = features(spec.variant, v, spline)?;
    let lin: f64 = fu.iter().zip(&fv).map(|(a, b)| a * b).sum::<f64>() * LINEAR_SCALE;
    let gauss = if spec.variant.has_gaussian() {
        spec.amplitude * (-spec.inv_bandwidth * sq_dist(u, v)).exp()
    } else {
        0.0
    };
    Ok(lin + gauss)
}

/// Training-side quantities that do not depend on the hyperparameters.
struct Design {
    /// `100 F Fᵀ`
    lin: DMatrix<f64>,
    sqdist: DMatrix<f64>,
    phi: Option<Vec<f64>>,
    spline: Option<SplineBasis>,
    clip_count: usize,
}

fn row(x: &DMatrix<f64>, i: usize) -> Vec<f64> {
    x.row(i).iter().cloned().collect()
}

fn build_design(variant: KernelVariant, knots: usize, data: &Dataset) -> Result<Design> {
    let n = data.n();
    let phi = if variant.uses_propensity() {
        if data.propensity_oracle.is_none() {
            return Err(Error::arg(format!("kernel '{}' requires a propensity oracle", variant.tag())));
        }
        Some(data.oracle_values()?.iter().cloned().collect::<Vec<f64>>())
    } else {
        None
    };
    let spline = if variant.uses_spline() {
        Some(SplineBasis::from_values(phi.as_ref().expect("propensity present"), knots)?)
    } else {
        None
    };
    let rows: Vec<Vec<f64>> = (0..n).map(|i| row(&data.x, i)).collect();
    let mut feats = Vec::with_capacity(n);
    let mut clip_count = 0;
    for i in 0..n {
        let u = GpPoint {
            a: data.a[i],
            x: &rows[i],
            phi: phi.as_ref().map(|p| p[i]),
        };
        let (f, c) = features(variant, &u, spline.as_ref())?;
        clip_count += usize::from(c);
        feats.push(f);
    }
    let m = feats[0].len();
    let f = DMatrix::from_fn(n, m, |i, j| feats[i][j]);
    let lin = &f * f.transpose() * LINEAR_SCALE;
    let mut sqdist = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            let u = GpPoint { a: data.a[i], x: &rows[i], phi: None };
            let v = GpPoint { a: data.a[j], x: &rows[j], phi: None };
            let d = sq_dist(&u, &v);
            sqdist[(i, j)] = d;
            sqdist[(j, i)] = d;
        }
    }
    Ok(Design {
        lin,
        sqdist,
        phi,
        spline,
        clip_count,
    })
}

/// Gram matrix `fixed + amp·exp(-b D)` with `noise_var` on the diagonal.
pub(crate) fn assemble(
    fixed: &DMatrix<f64>,
    sqdist: Option<&DMatrix<f64>>,
    amplitude: f64,
    inv_bandwidth: f64,
    noise_var: f64,
) -> DMatrix<f64> {
    let n = fixed.nrows();
    let mut k = fixed.clone();
    if let Some(d) = sqdist {
        for j in 0..n {
            for i in j..n {
                let v = amplitude * (-inv_bandwidth * d[(i, j)]).exp();
                k[(i, j)] += v;
                if i != j {
                    k[(j, i)] += v;
                }
            }
        }
    }
    for i in 0..n {
        k[(i, i)] += noise_var;
    }
    k
}

/// Factorization, dual weights and log-likelihood of `y ~ Normal(0, C)`.
pub(crate) struct GaussFit {
    pub chol: Cholesky<f64, Dyn>,
    pub alpha: DVector<f64>,
    pub loglik: f64,
}

pub(crate) fn gaussian_fit(c: &DMatrix<f64>, y: &DVector<f64>) -> Result<GaussFit> {
    let (chol, _) = linalg::cholesky_jittered(c)?;
    let alpha = chol.solve(y);
    let n = y.len() as f64;
    let loglik =
        -0.5 * y.dot(&alpha) - 0.5 * linalg::chol_logdet(&chol) - 0.5 * n * (2.0 * std::f64::consts::PI).ln();
    if !loglik.is_finite() {
        return Err(Error::Numeric("marginal log-likelihood is not finite".into()));
    }
    Ok(GaussFit { chol, alpha, loglik })
}

/// Natural cubic spline basis with `k` knots at empirical quantiles of `values`.
pub fn spline_basis(values: &[f64], k: usize) -> Result<SplineBasis> {
    SplineBasis::from_values(values, k)
}

/// Gaussian marginal log-likelihood of `Y` under `β ~ GP(0, κ)` and noise
/// standard deviation `noise_sd`.
pub fn gp_marginal_loglik(spec: &KernelSpec, data: &Dataset, noise_sd: f64) -> Result<f64> {
    spec.validate()?;
    if !(noise_sd > 0.0) {
        return Err(Error::arg("noise sd must be positive"));
    }
    let design = build_design(spec.variant, spec.knots, data)?;
    let c = assemble(
        &design.lin,
        spec.variant.has_gaussian().then_some(&design.sqdist),
        spec.amplitude,
        spec.inv_bandwidth,
        noise_sd * noise_sd,
    );
    Ok(gaussian_fit(&c, &data.y)?.loglik)
}

/// Hyperparameters chosen by empirical Bayes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct EbChoice {
    pub amplitude: f64,
    pub inv_bandwidth: f64,
    pub noise_sd: f64,
    pub loglik: f64,
    pub grid_best: f64,
}

/// Which of `(λ, b, ε)` are searched; inactive ones stay at the given value.
#[derive(Debug, Clone, Copy)]
pub(crate) struct EbAxes {
    pub start: [f64; 3],
    pub free: [bool; 3],
}

impl EbAxes {
    pub const ALL: EbAxes = EbAxes { start: [1.0; 3], free: [true; 3] };
    pub const NOISE_ONLY: EbAxes = EbAxes { start: [1.0; 3], free: [false, false, true] };

    pub fn fixed_bandwidth(b: f64) -> EbAxes {
        EbAxes { start: [1.0, b, 1.0], free: [true, false, true] }
    }
}

/// Maximize the marginal likelihood over the free log-hyperparameters:
/// 5-point log-grid per axis (lexicographic order, first maximum kept),
/// then Nelder–Mead from the best grid point.
pub(crate) fn eb_search(
    fixed: &DMatrix<f64>,
    sqdist: Option<&DMatrix<f64>>,
    y: &DVector<f64>,
    axes: EbAxes,
) -> Result<EbChoice> {
    let eval = |p: &[f64; 3]| -> f64 {
        let c = assemble(fixed, sqdist, p[0], p[1], p[2] * p[2]);
        gaussian_fit(&c, y).map(|g| g.loglik).unwrap_or(f64::NEG_INFINITY)
    };
    let free: Vec<usize> = (0..3).filter(|&j| axes.free[j]).collect();
    let expand = |v: &[f64]| {
        let mut p = axes.start;
        for (k, &j) in free.iter().enumerate() {
            p[j] = v[k].exp();
        }
        p
    };

    let mut best = (f64::NEG_INFINITY, axes.start);
    let cells = EB_GRID.len().pow(free.len() as u32);
    for cell in 0..cells {
        let mut p = axes.start;
        let mut rest = cell;
        for &j in free.iter().rev() {
            p[j] = EB_GRID[rest % EB_GRID.len()];
            rest /= EB_GRID.len();
        }
        let v = eval(&p);
        if v > best.0 {
            best = (v, p);
        }
    }
    if !best.0.is_finite() {
        return Err(Error::Numeric("marginal likelihood is not finite anywhere on the grid".into()));
    }
    let grid_best = best.0;

    let objective = |v: &[f64]| {
        if v.iter().all(|t| t.abs() <= LOG_BOUND) {
            eval(&expand(v))
        } else {
            f64::NEG_INFINITY
        }
    };
    let x0: Vec<f64> = free.iter().map(|&j| best.1[j].ln()).collect();
    let (x, ll) = crate::optim::nelder_mead_max(&objective, &x0, 0.5, 1e-6, 200 * free.len());
    let (p, loglik) = if ll >= grid_best { (expand(&x), ll) } else { (best.1, grid_best) };
    Ok(EbChoice {
        amplitude: p[0],
        inv_bandwidth: p[1],
        noise_sd: p[2],
        loglik,
        grid_best,
    })
}

/// A fitted GP regression of `Y` (centered at its sample mean) on `(A, X)`.
pub struct GpFit {
    pub spec: KernelSpec,
    pub noise_sd: f64,
    pub loglik: f64,
    /// Best log-likelihood found on the search grid.
    pub grid_loglik: f64,
    /// Number of training propensities moved by clipping.
    pub clip_count: usize,
    pub y_mean: f64,
    a: DVector<f64>,
    x: DMatrix<f64>,
    y_centered: DVector<f64>,
    phi: Option<Vec<f64>>,
    spline: Option<SplineBasis>,
    oracle: Option<Surface>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

impl GpFit {
    pub fn spline(&self) -> Option<&SplineBasis> {
        self.spline.as_ref()
    }

    /// Marginal log-likelihood of the centered training outcome at other
    /// hyperparameters, with the fitted spline basis.
    pub fn loglik_at(&self, amplitude: f64, inv_bandwidth: f64, noise_sd: f64) -> Result<f64> {
        let spec = KernelSpec {
            amplitude,
            inv_bandwidth,
            ..self.spec
        };
        let c = self.gram(&spec, noise_sd * noise_sd)?;
        Ok(gaussian_fit(&c, &self.y_centered)?.loglik)
    }

    fn gram(&self, spec: &KernelSpec, noise_var: f64) -> Result<DMatrix<f64>> {
        let n = self.a.len();
        let rows: Vec<Vec<f64>> = (0..n).map(|i| row(&self.x, i)).collect();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let u = GpPoint { a: self.a[i], x: &rows[i], phi: self.phi.as_ref().map(|p| p[i]) };
                let v = GpPoint { a: self.a[j], x: &rows[j], phi: self.phi.as_ref().map(|p| p[j]) };
                let val = kernel_eval(spec, &u, &v, self.spline.as_ref())?;
                k[(i, j)] = val;
                k[(j, i)] = val;
            }
            k[(i, i)] += noise_var;
        }
        Ok(k)
    }
}

/// Empirical-Bayes GP fit with the given kernel family.
pub fn eb_optimize(variant: KernelVariant, data: &Dataset) -> Result<GpFit> {
    eb_optimize_with_knots(variant, DEFAULT_KNOTS, data)
}

pub fn eb_optimize_with_knots(variant: KernelVariant, knots: usize, data: &Dataset) -> Result<GpFit> {
    if data.n() < 10 {
        return Err(Error::InsufficientSample { got: data.n(), need: 10 });
    }
    let design = build_design(variant, knots, data)?;
    let y_mean = data.y.mean();
    let yc = data.y.add_scalar(-y_mean);
    let sq = variant.has_gaussian().then_some(&design.sqdist);
    let axes = if variant.has_gaussian() { EbAxes::ALL } else { EbAxes::NOISE_ONLY };
    let choice = eb_search(&design.lin, sq, &yc, axes)?;
    let c = assemble(&design.lin, sq, choice.amplitude, choice.inv_bandwidth, choice.noise_sd.powi(2));
    let g = gaussian_fit(&c, &yc)?;
    Ok(GpFit {
        spec: KernelSpec {
            variant,
            amplitude: choice.amplitude,
            inv_bandwidth: choice.inv_bandwidth,
            knots,
        },
        noise_sd: choice.noise_sd,
        loglik: g.loglik,
        grid_loglik: choice.grid_best,
        clip_count: design.clip_count,
        y_mean,
        a: data.a.clone(),
        x: data.x.clone(),
        y_centered: yc,
        phi: design.phi,
        spline: design.spline,
        oracle: data.propensity_oracle.clone(),
        chol: g.chol,
        alpha: g.alpha,
    })
}

/// Posterior mean and SD of `(1/M) Σ_i {β(1, x_i) - β(0, x_i)}` over the
/// rows of `x_eval`.
pub fn ate_posterior(fit: &GpFit, x_eval: &DMatrix<f64>) -> Result<(f64, f64)> {
    let m = x_eval.nrows();
    if m == 0 {
        return Err(Error::arg("ate_posterior needs at least one evaluation point"));
    }
    if x_eval.ncols() != fit.x.ncols() {
        return Err(Error::arg("evaluation covariates have the wrong dimension"));
    }
    let n = fit.a.len();
    let eval_rows: Vec<Vec<f64>> = (0..m).map(|i| row(x_eval, i)).collect();
    let eval_phi: Option<Vec<f64>> = if fit.spec.variant.uses_propensity() {
        let f = fit.oracle.as_ref().ok_or_else(|| Error::arg("fit has no propensity oracle"))?;
        Some(eval_rows.iter().map(|r| f(r)).collect())
    } else {
        None
    };
    let train_rows: Vec<Vec<f64>> = (0..n).map(|i| row(&fit.x, i)).collect();
    // contrast points: (1, x_i) with weight +1/M, (0, x_i) with weight -1/M
    let mut pts = Vec::with_capacity(2 * m);
    for i in 0..m {
        let phi = eval_phi.as_ref().map(|p| p[i]);
        pts.push((GpPoint { a: 1.0, x: &eval_rows[i], phi }, 1.0 / m as f64));
        pts.push((GpPoint { a: 0.0, x: &eval_rows[i], phi }, -1.0 / m as f64));
    }
    let spline = fit.spline.as_ref();
    let mut kw = DVector::zeros(n);
    for j in 0..n {
        let u = GpPoint { a: fit.a[j], x: &train_rows[j], phi: fit.phi.as_ref().map(|p| p[j]) };
        let mut s = 0.0;
        for (t, w) in &pts {
            s += w * kernel_eval(&fit.spec, &u, t, spline)?;
        }
        kw[j] = s;
    }
    let mut prior_var = 0.0;
    for (s, ws) in &pts {
        for (t, wt) in &pts {
            prior_var += ws * wt * kernel_eval(&fit.spec, s, t, spline)?;
        }
    }
    let mean = kw.dot(&fit.alpha);
    let v = fit
        .chol
        .l()
        .solve_lower_triangular(&kw)
        .ok_or_else(|| Error::Numeric("triangular solve failed".into()))?;
    let var = (prior_var - v.norm_squared()).max(0.0);
    Ok((mean, var.sqrt()))
}

/// Fit a kernel family by empirical Bayes and summarize the sample ATE.
pub fn fit_gp_method(data: &Dataset, method: KernelVariant) -> Result<EstimatorResult> {
    let fit = eb_optimize(method, data)?;
    let (mean, sd) = ate_posterior(&fit, &data.x)?;
    Ok(EstimatorResult::gaussian(method.tag(), mean, sd, DEFAULT_LEVEL)?
        .with_diagnostic("amplitude", fit.spec.amplitude)
        .with_diagnostic("inv_bandwidth", fit.spec.inv_bandwidth)
        .with_diagnostic("noise_sd", fit.noise_sd)
        .with_diagnostic("loglik", fit.loglik)
        .with_diagnostic("clip_count", fit.clip_count as f64))
}
