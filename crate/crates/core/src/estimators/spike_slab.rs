//! Spike-and-slab Gibbs sampling and the sparse two-stage fits.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use super::{Dataset, EstimatorResult, DEFAULT_LEVEL};
use crate::error::{Error, Result};
use crate::rng;

/// Residual-variance treatment in the sampler.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseModel {
    Fixed(f64),
    /// `σ² ~ InverseGamma(shape, scale)`, updated each sweep.
    InverseGamma { shape: f64, scale: f64 },
}

/// Prior and run length for [`spike_slab_gibbs`]. Coefficient `j` is zero
/// with probability `1 - inclusion[j]` and otherwise `Normal(0, slab_var)`;
/// coefficients flagged `flat` are always included with a flat prior.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeSlabConfig {
    pub inclusion: Vec<f64>,
    pub flat: Vec<bool>,
    pub slab_var: f64,
    pub noise: NoiseModel,
    pub iterations: usize,
    pub burn_in: usize,
    /// Starting coefficients; zeros when absent.
    pub initial: Option<DVector<f64>>,
}

impl SpikeSlabConfig {
    pub fn new(inclusion: Vec<f64>, slab_var: f64, iterations: usize, burn_in: usize) -> Self {
        let q = inclusion.len();
        SpikeSlabConfig {
            inclusion,
            flat: vec![false; q],
            slab_var,
            noise: NoiseModel::Fixed(1.0),
            iterations,
            burn_in,
            initial: None,
        }
    }

    pub fn with_flat(mut self, flat: Vec<bool>) -> Self {
        self.flat = flat;
        self
    }

    fn validate(&self, q: usize) -> Result<()> {
        if self.inclusion.len() != q || self.flat.len() != q {
            return Err(Error::arg(format!(
                "prior vectors have lengths {} and {} but design has {q} columns",
                self.inclusion.len(),
                self.flat.len()
            )));
        }
        if self.inclusion.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::arg("inclusion probabilities must lie in [0, 1]"));
        }
        if !(self.slab_var > 0.0 && self.slab_var.is_finite()) {
            return Err(Error::arg("slab variance must be positive"));
        }
        match self.noise {
            NoiseModel::Fixed(v) if !(v > 0.0 && v.is_finite()) => {
                return Err(Error::arg("fixed noise variance must be positive"))
            }
            NoiseModel::InverseGamma { shape, scale } if !(shape > 0.0 && scale > 0.0) => {
                return Err(Error::arg("inverse-gamma shape and scale must be positive"))
            }
            _ => {}
        }
        if self.iterations == 0 || self.burn_in >= self.iterations {
            return Err(Error::arg(format!(
                "need iterations > burn_in, got {} and {}",
                self.iterations, self.burn_in
            )));
        }
        if let Some(init) = &self.initial {
            if init.len() != q {
                return Err(Error::arg("initial coefficient vector has the wrong length"));
            }
        }
        Ok(())
    }
}

/// Post-burn-in draws. Row `t` of `coefficients` is exactly zero wherever
/// row `t` of `included` is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub coefficients: DMatrix<f64>,
    pub included: DMatrix<u8>,
    pub noise_var: Vec<f64>,
}

impl PosteriorDraws {
    pub fn n_draws(&self) -> usize {
        self.coefficients.nrows()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.coefficients.column(j).iter().cloned().collect()
    }

    pub fn inclusion_probabilities(&self) -> Vec<f64> {
        let t = self.n_draws() as f64;
        (0..self.included.ncols())
            .map(|j| self.included.column(j).iter().map(|&v| f64::from(v)).sum::<f64>() / t)
            .collect()
    }

    pub fn posterior_mean(&self) -> DVector<f64> {
        let t = self.n_draws() as f64;
        DVector::from_iterator(
            self.coefficients.ncols(),
            (0..self.coefficients.ncols()).map(|j| self.coefficients.column(j).sum() / t),
        )
    }
}

/// Single-site Gibbs sampler for `y = Ψθ + ε` under the spike-and-slab prior
/// in `config`. Each sweep draws `(indicator_j, θ_j)` jointly from its full
/// conditional with `θ_j` integrated out of the indicator update.
pub fn spike_slab_gibbs(
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    config: &SpikeSlabConfig,
    seed: u64,
) -> Result<PosteriorDraws> {
    let (n, q) = design.shape();
    if y.len() != n {
        return Err(Error::arg(format!("design has {n} rows but y has length {}", y.len())));
    }
    config.validate(q)?;
    let gram = design.tr_mul(design);
    let xty = design.tr_mul(y);
    let s: Vec<f64> = (0..q).map(|j| gram[(j, j)]).collect();
    for j in 0..q {
        if config.flat[j] && s[j] == 0.0 {
            return Err(Error::Identifiability(format!("flat column {j} is identically zero")));
        }
    }
    let mut stream = rng::stream(seed);
    let mut theta = config.initial.clone().unwrap_or_else(|| DVector::zeros(q));
    let mut c = DVector::zeros(q);
    let mut rss = 0.0;
    let refresh = |theta: &DVector<f64>, c: &mut DVector<f64>, rss: &mut f64| {
        let r = y - design * theta;
        *rss = r.norm_squared();
        *c = &xty - &gram * theta;
    };
    refresh(&theta, &mut c, &mut rss);
    let mut sigma2 = match config.noise {
        NoiseModel::Fixed(v) => v,
        NoiseModel::InverseGamma { .. } => (rss / n as f64).max(1e-6),
    };

    let kept = config.iterations - config.burn_in;
    let mut coefficients = DMatrix::zeros(kept, q);
    let mut included = DMatrix::<u8>::zeros(kept, q);
    let mut noise_draws = Vec::with_capacity(kept);
    let tau2 = config.slab_var;
    let prior_logit: Vec<f64> = config
        .inclusion
        .iter()
        .map(|p| (p / (1.0 - p)).ln())
        .collect();
    let mut inc = vec![false; q];

    for it in 0..config.iterations {
        if it > 0 && it % 50 == 0 {
            refresh(&theta, &mut c, &mut rss);
        }
        for j in 0..q {
            let sj = s[j];
            let m = c[j] + sj * theta[j];
            let new = if config.flat[j] {
                inc[j] = true;
                m / sj + (sigma2 / sj).sqrt() * stream.sample::<f64, _>(StandardNormal)
            } else {
                let prec = sj / sigma2 + 1.0 / tau2;
                let mu = (m / sigma2) / prec;
                let p = config.inclusion[j];
                let on = if p <= 0.0 {
                    false
                } else if p >= 1.0 {
                    true
                } else {
                    let log_bf = -0.5 * (tau2 * prec).ln() + 0.5 * mu * mu * prec;
                    let logit = prior_logit[j] + log_bf;
                    if logit.is_nan() {
                        return Err(Error::Numeric(format!("non-finite inclusion odds at coefficient {j}")));
                    }
                    let prob = 1.0 / (1.0 + (-logit).exp());
                    stream.random::<f64>() < prob
                };
                inc[j] = on;
                if on {
                    mu + stream.sample::<f64, _>(StandardNormal) / prec.sqrt()
                } else {
                    0.0
                }
            };
            if !new.is_finite() {
                return Err(Error::Numeric(format!("non-finite draw for coefficient {j}")));
            }
            let delta = new - theta[j];
            if delta != 0.0 {
                rss += -2.0 * delta * c[j] + delta * delta * sj;
                c.axpy(-delta, &gram.column(j), 1.0);
                theta[j] = new;
            }
        }
        if let NoiseModel::InverseGamma { shape, scale } = config.noise {
            let rate = scale + 0.5 * rss.max(0.0);
            let g = Gamma::new(shape + 0.5 * n as f64, 1.0 / rate)
                .map_err(|e| Error::Numeric(format!("noise update: {e}")))?;
            sigma2 = 1.0 / g.sample(&mut stream);
            if !sigma2.is_finite() {
                return Err(Error::Numeric("non-finite noise variance draw".into()));
            }
        }
        if it >= config.burn_in {
            let t = it - config.burn_in;
            for j in 0..q {
                coefficients[(t, j)] = theta[j];
                included[(t, j)] = u8::from(inc[j]);
            }
            noise_draws.push(sigma2);
        }
    }
    Ok(PosteriorDraws {
        coefficients,
        included,
        noise_var: noise_draws,
    })
}

/// The three sparse fits of `γ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SasVariant {
    /// Independent spike-and-slab prior on `β`.
    Naive,
    /// Variables selected in the exposure model are forced into the outcome model.
    Shared,
    /// Clever covariate `Â = X φ̂` added with a flat prior.
    Direct,
}

impl SasVariant {
    pub fn tag(self) -> &'static str {
        match self {
            SasVariant::Naive => "naive",
            SasVariant::Shared => "shared",
            SasVariant::Direct => "direct",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(SasVariant::Naive),
            "shared" => Ok(SasVariant::Shared),
            "direct" => Ok(SasVariant::Direct),
            other => Err(Error::arg(format!("unknown spike-and-slab variant '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SasSettings {
    pub p_beta: f64,
    pub p_phi: f64,
    pub slab_var_beta: f64,
    pub slab_var_phi: f64,
    pub noise: NoiseModel,
    pub iterations: usize,
    pub burn_in: usize,
    pub level: f64,
}

impl Default for SasSettings {
    fn default() -> Self {
        SasSettings {
            p_beta: 5.0 / 200.0,
            p_phi: 5.0 / 200.0,
            slab_var_beta: 1.0,
            slab_var_phi: 1.0,
            noise: NoiseModel::Fixed(1.0),
            iterations: 4000,
            burn_in: 1000,
            level: DEFAULT_LEVEL,
        }
    }
}

/// Exposure-model posterior summaries used by the shared and direct fits.
#[derive(Debug, Clone, PartialEq)]
pub struct SasStageOne {
    /// `Pr(φ_j ≠ 0 | A, X)`.
    pub inclusion: Vec<f64>,
    pub phi_hat: DVector<f64>,
}

/// Spike-and-slab fit of `A` on `X`.
pub fn sas_stage_one(data: &Dataset, settings: &SasSettings, seed: u64) -> Result<SasStageOne> {
    let mut cfg = SpikeSlabConfig::new(
        vec![settings.p_phi; data.p()],
        settings.slab_var_phi,
        settings.iterations,
        settings.burn_in,
    );
    cfg.noise = settings.noise;
    let draws = spike_slab_gibbs(&data.x, &data.a, &cfg, rng::derive_seed(seed, &["sas-stage1"], 0))?;
    Ok(SasStageOne {
        inclusion: draws.inclusion_probabilities(),
        phi_hat: draws.posterior_mean(),
    })
}

/// Outcome-model inclusion probabilities for the shared variant: 1 for
/// variables with stage-one inclusion probability at least 1/2, `p_beta`
/// otherwise.
pub fn shared_outcome_prior(stage_one_inclusion: &[f64], p_beta: f64) -> Vec<f64> {
    stage_one_inclusion
        .iter()
        .map(|&pi| if pi >= 0.5 { 1.0 } else { p_beta })
        .collect()
}

/// Sparse fit of `γ`; the exposure enters with a flat prior.
pub fn fit_sas(data: &Dataset, variant: SasVariant, settings: &SasSettings, seed: u64) -> Result<EstimatorResult> {
    let stage = match variant {
        SasVariant::Naive => None,
        _ => Some(sas_stage_one(data, settings, seed)?),
    };
    fit_sas_with_stage(data, variant, settings, stage.as_ref(), seed)
}

/// As [`fit_sas`], reusing a precomputed exposure-model fit.
pub fn fit_sas_with_stage(
    data: &Dataset,
    variant: SasVariant,
    settings: &SasSettings,
    stage: Option<&SasStageOne>,
    seed: u64,
) -> Result<EstimatorResult> {
    let p = data.p();
    let a_col = DMatrix::from_column_slice(data.n(), 1, data.a.as_slice());
    let need_stage = || {
        stage.ok_or_else(|| Error::arg(format!("variant '{}' requires a stage-one fit", variant.tag())))
    };
    let (design, mut inclusion, mut flat) = match variant {
        SasVariant::Naive => (crate::linalg::hstack(&[&a_col, &data.x]), vec![1.0], vec![true]),
        SasVariant::Shared => {
            let st = need_stage()?;
            if st.inclusion.len() != p {
                return Err(Error::arg("stage-one inclusion vector has the wrong length"));
            }
            let mut inc = vec![1.0];
            inc.extend(shared_outcome_prior(&st.inclusion, settings.p_beta));
            let mut f = vec![true];
            f.extend(vec![false; p]);
            (crate::linalg::hstack(&[&a_col, &data.x]), inc, f)
        }
        SasVariant::Direct => {
            let st = need_stage()?;
            if st.phi_hat.len() != p {
                return Err(Error::arg("stage-one coefficients have the wrong length"));
            }
            let a_hat = &data.x * &st.phi_hat;
            let a_hat_col = DMatrix::from_column_slice(data.n(), 1, a_hat.as_slice());
            let mut inc = vec![1.0, 1.0];
            inc.extend(vec![settings.p_beta; p]);
            let mut f = vec![true, true];
            f.extend(vec![false; p]);
            (crate::linalg::hstack(&[&a_col, &a_hat_col, &data.x]), inc, f)
        }
    };
    if variant == SasVariant::Naive {
        inclusion.extend(vec![settings.p_beta; p]);
        flat.extend(vec![false; p]);
    }
    run_outcome(data, variant, settings, design, inclusion, flat, seed)
}

fn run_outcome(
    data: &Dataset,
    variant: SasVariant,
    settings: &SasSettings,
    design: DMatrix<f64>,
    inclusion: Vec<f64>,
    flat: Vec<bool>,
    seed: u64,
) -> Result<EstimatorResult> {
    let mut cfg = SpikeSlabConfig::new(inclusion, settings.slab_var_beta, settings.iterations, settings.burn_in)
        .with_flat(flat);
    cfg.noise = settings.noise;
    let draws = spike_slab_gibbs(&design, &data.y, &cfg, rng::derive_seed(seed, &["sas", variant.tag()], 0))?;
    let gamma = draws.column(0);
    let mut r = EstimatorResult::from_draws(variant.tag(), &gamma, settings.level)?;
    if variant == SasVariant::Direct {
        r = r.with_diagnostic("omega_hat", crate::stats::mean(&draws.column(1)));
    }
    Ok(r)
}
