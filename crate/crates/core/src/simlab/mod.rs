//! Simulation studies: data-generating processes, a seeded replication
//! engine and Monte Carlo summaries.
//!
//! Replication `r` of a study draws its dataset from a stream derived from
//! `(base_seed, study, setting, r)`, so the output does not depend on the
//! worker count and every method in a replication sees the same data.

pub mod bias_mc;
pub mod dgp;
mod summary;

use std::fmt;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{
    fit_sas_with_stage, sas_stage_one, Dataset, EstimatorResult, FirstStage, OutcomeScale, RidgeContext, RidgeMethod,
    SasSettings, SasVariant, DEFAULT_LEVEL,
};
use crate::gp::{self, semipar, KernelVariant};
use crate::rng;

pub use dgp::{
    dgp_factor, dgp_gp, dgp_manifold, dgp_ridge, dgp_sas, dgp_sas_sized, factor_coefficients, GpSetting, RidgeSetting,
    SasScheme, Truth,
};
pub use summary::{summarize, SummaryReport, SummaryRow};

/// Share of failed records above which a study is aborted.
pub const MAX_FAILURE_RATE: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Study {
    Ridge,
    Sas,
    Gp,
    Factor,
    Manifold,
}

impl Study {
    pub fn tag(self) -> &'static str {
        match self {
            Study::Ridge => "ridge",
            Study::Sas => "sas",
            Study::Gp => "gp",
            Study::Factor => "factor",
            Study::Manifold => "manifold",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [Study::Ridge, Study::Sas, Study::Gp, Study::Factor, Study::Manifold]
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| Error::arg(format!("unknown study '{s}'")))
    }

    pub fn methods(self) -> &'static [&'static str] {
        match self {
            Study::Ridge => &["naive", "direct", "debiased"],
            Study::Sas => &["naive", "shared", "direct"],
            Study::Gp => &["naive", "ipw", "sop", "sop_gp"],
            Study::Factor | Study::Manifold => &["naive", "direct"],
        }
    }

    pub fn settings(self) -> Vec<String> {
        match self {
            Study::Ridge => RidgeSetting::ALL.iter().map(|s| s.tag().to_string()).collect(),
            Study::Sas => SasScheme::ALL.iter().map(|s| s.tag().to_string()).collect(),
            Study::Gp => [false, true]
                .iter()
                .flat_map(|&nl| [false, true].map(|h| GpSetting { nonlinear: nl, heterogeneous: h }.tag()))
                .collect(),
            Study::Factor | Study::Manifold => vec!["default".to_string()],
        }
    }

    /// `(N, P)` used by the corresponding experiment.
    pub fn default_dims(self) -> (usize, usize) {
        match self {
            Study::Ridge => (100, 400),
            Study::Sas => (200, 200),
            Study::Gp => (250, 20),
            Study::Factor => (200, 200),
            Study::Manifold => (300, 10),
        }
    }
}

impl fmt::Display for Study {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// How the ridge and factor studies obtain the clever covariate `Â`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstStageRule {
    /// Ridge fit of `A` on `X` with empirical-Bayes signal variance.
    EmpiricalBayes,
    /// `Â = Xφ` with the true `φ`.
    Oracle,
}

/// Study-specific knobs. Unused fields are ignored by other studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyParams {
    /// Ridge penalty `λ` for the ridge and factor studies, with unit noise
    /// variance. When unset, `λ` and the noise variance are chosen per fit by
    /// empirical Bayes.
    pub lambda: Option<f64>,
    /// Covariate noise for the factor and manifold studies.
    pub sigma_x: Option<f64>,
    /// Number of latent factors.
    pub latent_dim: usize,
    pub first_stage: FirstStageRule,
    /// Gibbs iterations (including burn-in) for the sparse study.
    pub iterations: usize,
    pub burn_in: usize,
}

impl Default for StudyParams {
    fn default() -> Self {
        let sas = SasSettings::default();
        StudyParams {
            lambda: None,
            sigma_x: None,
            latent_dim: 5,
            first_stage: FirstStageRule::Oracle,
            iterations: sas.iterations,
            burn_in: sas.burn_in,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySpec {
    pub study: Study,
    pub setting: String,
    pub n: usize,
    pub p: usize,
    pub reps: usize,
    pub base_seed: u64,
    pub methods: Vec<String>,
    pub params: StudyParams,
}

impl StudySpec {
    /// A spec with the study's default dimensions and full method list.
    pub fn new(study: Study, setting: &str, reps: usize, base_seed: u64) -> Self {
        let (n, p) = study.default_dims();
        StudySpec {
            study,
            setting: setting.to_string(),
            n,
            p,
            reps,
            base_seed,
            methods: study.methods().iter().map(|m| m.to_string()).collect(),
            params: StudyParams::default(),
        }
    }

    pub fn with_dims(mut self, n: usize, p: usize) -> Self {
        self.n = n;
        self.p = p;
        self
    }

    pub fn with_methods(mut self, methods: &[&str]) -> Self {
        self.methods = methods.iter().map(|m| m.to_string()).collect();
        self
    }

    pub fn with_params(mut self, params: StudyParams) -> Self {
        self.params = params;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::arg("method list is empty"));
        }
        let allowed = self.study.methods();
        for m in &self.methods {
            if !allowed.contains(&m.as_str()) {
                return Err(Error::arg(format!(
                    "method '{m}' is not available for study '{}' (expected one of {})",
                    self.study,
                    allowed.join(", ")
                )));
            }
        }
        if self.reps == 0 || self.n == 0 || self.p == 0 {
            return Err(Error::arg("N, P and the replication count must be positive"));
        }
        match self.study {
            Study::Ridge => {
                RidgeSetting::parse(&self.setting)?;
            }
            Study::Sas => {
                SasScheme::parse(&self.setting)?;
                if self.params.burn_in >= self.params.iterations {
                    return Err(Error::arg("burn-in must be shorter than the chain"));
                }
            }
            Study::Gp => {
                GpSetting::parse(&self.setting)?;
                if self.p < 5 {
                    return Err(Error::arg("the GP study needs P >= 5"));
                }
            }
            Study::Factor | Study::Manifold => {
                let sx = self
                    .params
                    .sigma_x
                    .ok_or_else(|| Error::arg(format!("study '{}' needs sigma_x", self.study)))?;
                if !(sx >= 0.0 && sx.is_finite()) {
                    return Err(Error::arg("sigma_x must be nonnegative"));
                }
                if self.study == Study::Factor && !(1..=self.p).contains(&self.params.latent_dim) {
                    return Err(Error::arg("latent_dim must lie in 1..=P"));
                }
            }
        }
        if let Some(l) = self.params.lambda {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::arg("lambda must be positive"));
            }
        }
        Ok(())
    }

    /// Seed of the dataset stream of replication `rep`.
    pub fn replication_seed(&self, rep: usize) -> u64 {
        rng::derive_seed(self.base_seed, &[self.study.tag(), &self.setting], rep as u64)
    }

    /// Draw the dataset of replication `rep`.
    pub fn generate(&self, rep: usize) -> Result<(Dataset, Truth)> {
        let seed = self.replication_seed(rep);
        match self.study {
            Study::Ridge => dgp_ridge(RidgeSetting::parse(&self.setting)?, self.n, self.p, seed),
            Study::Sas => dgp_sas_sized(SasScheme::parse(&self.setting)?, self.n, self.p, seed),
            Study::Gp => dgp_gp(GpSetting::parse(&self.setting)?, self.n, self.p, seed),
            Study::Factor => dgp_factor(self.sigma_x(), self.n, self.p, self.params.latent_dim, seed),
            Study::Manifold => dgp_manifold(self.p, self.sigma_x(), self.n, seed),
        }
    }

    fn sigma_x(&self) -> f64 {
        self.params.sigma_x.unwrap_or(0.0)
    }
}

/// One method applied to one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRecord {
    pub study: Study,
    pub setting: String,
    pub method: String,
    pub rep: usize,
    pub seed: u64,
    pub estimate: f64,
    pub post_sd: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub truth: f64,
    pub elapsed_s: f64,
    /// `"ok"` or the error tag of a failed fit.
    pub status: String,
}

impl ReplicationRecord {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    pub fn covers(&self) -> bool {
        self.ci_lo <= self.truth && self.truth <= self.ci_hi
    }
}

/// Method state shared within a replication.
struct Fitter<'a> {
    spec: &'a StudySpec,
    data: &'a Dataset,
    seed: u64,
    ridge: Option<RidgeContext<'a>>,
    ridge_stage: Option<Result<crate::estimators::StageOne>>,
    sas_stage: Option<Result<crate::estimators::SasStageOne>>,
}

impl<'a> Fitter<'a> {
    fn new(spec: &'a StudySpec, data: &'a Dataset, seed: u64) -> Self {
        Fitter {
            spec,
            data,
            seed,
            ridge: None,
            ridge_stage: None,
            sas_stage: None,
        }
    }

    fn sas_settings(&self) -> SasSettings {
        SasSettings {
            iterations: self.spec.params.iterations,
            burn_in: self.spec.params.burn_in,
            ..SasSettings::default()
        }
    }

    fn fit(&mut self, method: &str) -> Result<EstimatorResult> {
        match self.spec.study {
            Study::Ridge | Study::Factor => {
                let method = match method {
                    "naive" => RidgeMethod::Naive,
                    "direct" => RidgeMethod::Direct,
                    _ => RidgeMethod::Debiased,
                };
                let data = self.data;
                let rule = self.spec.params.first_stage;
                let ctx = self.ridge.get_or_insert_with(|| RidgeContext::new(data));
                let stage = if method == RidgeMethod::Naive {
                    None
                } else {
                    Some(
                        self.ridge_stage
                            .get_or_insert_with(|| {
                                ctx.stage_one(match rule {
                                    FirstStageRule::EmpiricalBayes => FirstStage::EmpiricalBayes,
                                    FirstStageRule::Oracle => FirstStage::Oracle,
                                })
                            })
                            .as_ref()
                            .map_err(clone_err)?,
                    )
                };
                let scale = match self.spec.params.lambda {
                    Some(lambda) => OutcomeScale { lambda, noise_var: 1.0 },
                    None => ctx.eb_outcome_scale(method, stage)?,
                };
                ctx.fit(method, stage, scale, DEFAULT_LEVEL)
                    .map(|r| r.with_diagnostic("lambda", scale.lambda).with_diagnostic("noise_var", scale.noise_var))
            }
            Study::Sas => {
                let variant = SasVariant::parse(method)?;
                let settings = self.sas_settings();
                let seed = self.seed;
                let stage = if variant == SasVariant::Naive {
                    None
                } else {
                    let data = self.data;
                    Some(
                        self.sas_stage
                            .get_or_insert_with(|| sas_stage_one(data, &settings, seed))
                            .as_ref()
                            .map_err(clone_err)?,
                    )
                };
                fit_sas_with_stage(self.data, variant, &settings, stage, seed)
            }
            Study::Gp => gp::fit_gp_method(self.data, KernelVariant::parse(method)?),
            Study::Manifold => match method {
                "naive" => semipar::fit_semipar_naive(self.data),
                _ => semipar::fit_semipar_direct(self.data),
            },
        }
    }
}

/// Re-raise a cached stage-one failure for each method that needs it.
fn clone_err(e: &Error) -> Error {
    match e {
        Error::Identifiability(m) => Error::Identifiability(m.clone()),
        Error::NumericalDegeneracy(m) => Error::NumericalDegeneracy(m.clone()),
        Error::InvalidArgument(m) => Error::InvalidArgument(m.clone()),
        Error::InsufficientSample { got, need } => Error::InsufficientSample { got: *got, need: *need },
        Error::DegeneratePilot => Error::DegeneratePilot,
        other => Error::Numeric(other.to_string()),
    }
}

fn failed_record(spec: &StudySpec, method: &str, rep: usize, seed: u64, truth: f64, tag: &str) -> ReplicationRecord {
    ReplicationRecord {
        study: spec.study,
        setting: spec.setting.clone(),
        method: method.to_string(),
        rep,
        seed,
        estimate: f64::NAN,
        post_sd: f64::NAN,
        ci_lo: f64::NAN,
        ci_hi: f64::NAN,
        truth,
        elapsed_s: 0.0,
        status: tag.to_string(),
    }
}

/// Run every method of `spec` on replication `rep`.
pub fn run_replication(spec: &StudySpec, rep: usize) -> Vec<ReplicationRecord> {
    let seed = spec.replication_seed(rep);
    let (data, truth) = match spec.generate(rep) {
        Ok(v) => v,
        Err(e) => {
            return spec
                .methods
                .iter()
                .map(|m| failed_record(spec, m, rep, seed, f64::NAN, e.tag()))
                .collect()
        }
    };
    let mut fitter = Fitter::new(spec, &data, seed);
    spec.methods
        .iter()
        .map(|m| {
            let t0 = Instant::now();
            let res = fitter.fit(m);
            let elapsed = t0.elapsed().as_secs_f64();
            match res {
                Ok(r) => ReplicationRecord {
                    study: spec.study,
                    setting: spec.setting.clone(),
                    method: m.clone(),
                    rep,
                    seed,
                    estimate: r.estimate,
                    post_sd: r.posterior_sd,
                    ci_lo: r.ci_lo,
                    ci_hi: r.ci_hi,
                    truth: truth.target,
                    elapsed_s: elapsed,
                    status: "ok".to_string(),
                },
                Err(e) => {
                    let mut rec = failed_record(spec, m, rep, seed, truth.target, e.tag());
                    rec.elapsed_s = elapsed;
                    rec
                }
            }
        })
        .collect()
}

/// Run all replications on a pool of `workers` threads and abort if more
/// than [`MAX_FAILURE_RATE`] of the records failed.
pub fn run_study(spec: &StudySpec, workers: usize) -> Result<Vec<ReplicationRecord>> {
    let records = run_replications(spec, workers)?;
    check_failures(&records)?;
    Ok(records)
}

pub fn check_failures(records: &[ReplicationRecord]) -> Result<()> {
    let failed = records.iter().filter(|r| !r.is_ok()).count();
    if failed as f64 > MAX_FAILURE_RATE * records.len() as f64 {
        return Err(Error::StudyAborted {
            failed,
            total: records.len(),
        });
    }
    Ok(())
}

/// Run all replications on a pool of `workers` threads without the failure
/// check. Records come back ordered by replication, then by method.
pub fn run_replications(spec: &StudySpec, workers: usize) -> Result<Vec<ReplicationRecord>> {
    spec.validate()?;
    if workers == 0 {
        return Err(Error::arg("workers must be positive"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::arg(format!("cannot build worker pool: {e}")))?;
    let records: Vec<ReplicationRecord> = pool.install(|| {
        (0..spec.reps)
            .into_par_iter()
            .map(|r| run_replication(spec, r))
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect()
    });
    Ok(records)
}
