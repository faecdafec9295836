//! Command-line front end.
//!
//! Every command resolves its configuration (defaults, then an optional TOML
//! file, then flags), writes its CSV outputs atomically into the output
//! directory and records the resolved configuration in `manifest.json`.
//! `replay` reruns a manifest and reproduces the CSV files byte for byte.
//!
//! Exit codes: 0 success, 2 configuration error, 3 study abort, 4 numeric
//! failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::FirstStage;
use crate::rng;
use crate::selection_bias::{self, CovarianceModel, PriorSpec};
use crate::simlab::bias_mc::{self, BiasDesign, BiasEstimator};
use crate::simlab::{self, FirstStageRule, ReplicationRecord, Study, StudyParams, StudySpec, SummaryReport};
use crate::{linalg, spectra, stats};

/// Bumped whenever a column of any CSV output changes.
pub const SCHEMA_VERSION: u32 = 1;

pub const RECORDS_COLUMNS: [&str; 12] = [
    "study", "setting", "method", "rep", "seed", "estimate", "post_sd", "ci_lo", "ci_hi", "truth", "elapsed_s", "status",
];

pub const SUMMARY_COLUMNS: [&str; 12] = [
    "study",
    "setting",
    "method",
    "n_reps",
    "coverage",
    "coverage_mcse",
    "mean_width",
    "mean_post_sd",
    "rmse",
    "rmse_mcse",
    "bias",
    "bias_mcse",
];

pub const BIAS_CURVE_COLUMNS: [&str; 4] = ["lambda", "formula_bias", "mc_bias", "mc_se"];
pub const CONCENTRATION_DRAW_COLUMNS: [&str; 3] = ["p", "draw_index", "delta"];
pub const CONCENTRATION_SUMMARY_COLUMNS: [&str; 5] = ["p", "draws", "sd", "predicted_sd", "ratio"];
pub const HISTOGRAM_COLUMNS: [&str; 4] = ["bin_lo", "bin_hi", "empirical_mass", "mp_mass"];
pub const STIELTJES_COLUMNS: [&str; 3] = ["lambda", "v", "inv_lambda"];

pub const MANIFEST_FILE: &str = "manifest.json";

/// `17` significant digits.
fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

#[derive(Debug, Parser)]
#[command(name = "ignorability", version, about = "Selection-bias priors and simulation studies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a simulation study and write records.csv and summary.csv.
    Simulate(SimulateArgs),
    /// Closed-form ridge bias over a penalty grid, optionally with Monte Carlo.
    BiasCurve(BiasCurveArgs),
    /// Prior draws of the selection bias for several dimensions.
    Concentration(ConcentrationArgs),
    /// Eigenvalue histograms and Stieltjes transforms of sample covariances.
    Spectra(SpectraArgs),
    /// Rerun the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML file with configuration keys; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    study: Option<String>,
    /// Comma-separated setting tags; all settings when omitted.
    #[arg(long, value_delimiter = ',')]
    setting: Option<Vec<String>>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated methods; all methods of the study when omitted.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long)]
    workers: Option<usize>,
    /// Fill the elapsed_s column (makes records.csv run-dependent).
    #[arg(long)]
    timing: bool,
    #[arg(long)]
    lambda: Option<f64>,
    /// Comma-separated covariate noise levels (factor and manifold studies).
    #[arg(long, value_delimiter = ',')]
    sigma_x: Option<Vec<f64>>,
    #[arg(long)]
    latent_dim: Option<usize>,
    /// `oracle` or `empirical_bayes`.
    #[arg(long)]
    first_stage: Option<String>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
}

#[derive(Debug, Args)]
struct BiasCurveArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    #[arg(long)]
    r: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    omega0: Option<f64>,
    /// `naive` or `zprior`.
    #[arg(long)]
    estimator: Option<String>,
    /// Z-prior first stage: `shared`, `empirical_bayes` or `oracle`.
    #[arg(long)]
    first_stage: Option<String>,
    #[arg(long)]
    with_mc: bool,
    #[arg(long)]
    mc_reps: Option<usize>,
    #[arg(long)]
    spectrum_draws: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct ConcentrationArgs {
    #[command(flatten)]
    common: Common,
    /// `ridge`, `spike_slab` or `gp`.
    #[arg(long)]
    prior: Option<String>,
    #[arg(long, value_delimiter = ',')]
    p_list: Option<Vec<usize>>,
    #[arg(long)]
    draws: Option<usize>,
    #[arg(long)]
    a: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct SpectraArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    r: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    /// `identity` or `factor`.
    #[arg(long)]
    cov: Option<String>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    sigma_x: Option<f64>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    /// Manifest written by an earlier run.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for the rerun.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub study: Option<Study>,
    pub settings: Vec<String>,
    pub n: Option<usize>,
    pub p: Option<usize>,
    pub reps: usize,
    pub seed: u64,
    pub methods: Vec<String>,
    pub workers: usize,
    pub timing: bool,
    pub lambda: Option<f64>,
    pub sigma_x: Vec<f64>,
    pub latent_dim: usize,
    pub first_stage: FirstStageRule,
    pub iterations: usize,
    pub burn_in: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        let params = StudyParams::default();
        SimulateConfig {
            study: None,
            settings: Vec::new(),
            n: None,
            p: None,
            reps: 100,
            seed: 0,
            methods: Vec::new(),
            workers: 1,
            timing: false,
            lambda: None,
            sigma_x: Vec::new(),
            latent_dim: params.latent_dim,
            first_stage: params.first_stage,
            iterations: params.iterations,
            burn_in: params.burn_in,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BiasCurveConfig {
    pub lambdas: Vec<f64>,
    pub r: f64,
    pub n: usize,
    pub eta: f64,
    pub omega0: f64,
    pub estimator: String,
    pub first_stage: String,
    pub with_mc: bool,
    pub mc_reps: usize,
    pub spectrum_draws: usize,
    pub seed: u64,
}

impl Default for BiasCurveConfig {
    fn default() -> Self {
        BiasCurveConfig {
            lambdas: vec![0.25, 0.5, 1.0, 2.0, 4.0, 8.0],
            r: 2.0,
            n: 150,
            eta: 2.0,
            omega0: 1.0,
            estimator: "naive".into(),
            first_stage: "shared".into(),
            with_mc: false,
            mc_reps: 500,
            spectrum_draws: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConcentrationConfig {
    pub prior: String,
    pub p_list: Vec<usize>,
    pub draws: usize,
    pub a: f64,
    pub tau2_beta: f64,
    pub tau2_phi: f64,
    /// Inclusion probability of both spike-and-slab priors.
    pub inclusion: f64,
    /// Covariate draws representing the covariate law for the GP prior.
    pub design_points: usize,
    pub seed: u64,
}

impl Default for ConcentrationConfig {
    fn default() -> Self {
        ConcentrationConfig {
            prior: "ridge".into(),
            p_list: vec![1, 10, 50],
            draws: 2000,
            a: 1.0,
            tau2_beta: 1.0,
            tau2_phi: 1.0,
            inclusion: 0.1,
            design_points: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectraConfig {
    pub r: f64,
    pub n: usize,
    pub cov: String,
    pub latent_dim: usize,
    pub sigma_x: f64,
    pub bins: usize,
    pub lambdas: Vec<f64>,
    pub seed: u64,
}

impl Default for SpectraConfig {
    fn default() -> Self {
        SpectraConfig {
            r: 2.0,
            n: 500,
            cov: "identity".into(),
            latent_dim: 5,
            sigma_x: 0.05,
            bins: 50,
            lambdas: vec![1e-3, 1e-2, 1e-1, 1.0, 1e1],
            seed: 0,
        }
    }
}

/// A fully resolved command.
#[derive(Debug, Clone, PartialEq)]
pub enum RunConfig {
    Simulate(SimulateConfig),
    BiasCurve(BiasCurveConfig),
    Concentration(ConcentrationConfig),
    Spectra(SpectraConfig),
}

impl RunConfig {
    pub fn command(&self) -> &'static str {
        match self {
            RunConfig::Simulate(_) => "simulate",
            RunConfig::BiasCurve(_) => "bias-curve",
            RunConfig::Concentration(_) => "concentration",
            RunConfig::Spectra(_) => "spectra",
        }
    }

    fn seed(&self) -> u64 {
        match self {
            RunConfig::Simulate(c) => c.seed,
            RunConfig::BiasCurve(c) => c.seed,
            RunConfig::Concentration(c) => c.seed,
            RunConfig::Spectra(c) => c.seed,
        }
    }

    fn to_json(&self) -> Result<serde_json::Value> {
        Ok(match self {
            RunConfig::Simulate(c) => serde_json::to_value(c)?,
            RunConfig::BiasCurve(c) => serde_json::to_value(c)?,
            RunConfig::Concentration(c) => serde_json::to_value(c)?,
            RunConfig::Spectra(c) => serde_json::to_value(c)?,
        })
    }

    fn from_json(command: &str, v: serde_json::Value) -> Result<Self> {
        let bad = |e: serde_json::Error| Error::arg(format!("manifest config: {e}"));
        Ok(match command {
            "simulate" => RunConfig::Simulate(serde_json::from_value(v).map_err(bad)?),
            "bias-curve" => RunConfig::BiasCurve(serde_json::from_value(v).map_err(bad)?),
            "concentration" => RunConfig::Concentration(serde_json::from_value(v).map_err(bad)?),
            "spectra" => RunConfig::Spectra(serde_json::from_value(v).map_err(bad)?),
            other => return Err(Error::arg(format!("manifest names unknown command '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub artifact_version: String,
    pub timestamp_unix: u64,
    pub command: String,
    pub base_seed: u64,
    pub config: serde_json::Value,
    pub files: Vec<String>,
    #[serde(default)]
    pub notes: Vec<String>,
}

fn load_toml<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::arg(format!("cannot read config {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Error::arg(format!("config {}: {e}", p.display())))
        }
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn parse_first_stage(s: &str) -> Result<FirstStageRule> {
    match s {
        "oracle" => Ok(FirstStageRule::Oracle),
        "empirical_bayes" => Ok(FirstStageRule::EmpiricalBayes),
        _ => Err(Error::arg(format!("unknown first stage '{s}' (expected oracle or empirical_bayes)"))),
    }
}

fn resolve_simulate(a: SimulateArgs) -> Result<SimulateConfig> {
    let mut c: SimulateConfig = load_toml(a.common.config.as_deref())?;
    if let Some(s) = a.study {
        c.study = Some(Study::parse(&s)?);
    }
    set(&mut c.settings, a.setting);
    if a.n.is_some() {
        c.n = a.n;
    }
    if a.p.is_some() {
        c.p = a.p;
    }
    set(&mut c.reps, a.reps);
    set(&mut c.seed, a.seed);
    set(&mut c.methods, a.methods);
    set(&mut c.workers, a.workers);
    c.timing |= a.timing;
    if a.lambda.is_some() {
        c.lambda = a.lambda;
    }
    set(&mut c.sigma_x, a.sigma_x);
    set(&mut c.latent_dim, a.latent_dim);
    if let Some(fs) = a.first_stage {
        c.first_stage = parse_first_stage(&fs)?;
    }
    set(&mut c.iterations, a.iterations);
    set(&mut c.burn_in, a.burn_in);
    Ok(c)
}

fn resolve_bias_curve(a: BiasCurveArgs) -> Result<BiasCurveConfig> {
    let mut c: BiasCurveConfig = load_toml(a.common.config.as_deref())?;
    set(&mut c.lambdas, a.lambdas);
    set(&mut c.r, a.r);
    set(&mut c.n, a.n);
    set(&mut c.eta, a.eta);
    set(&mut c.omega0, a.omega0);
    set(&mut c.estimator, a.estimator);
    set(&mut c.first_stage, a.first_stage);
    c.with_mc |= a.with_mc;
    set(&mut c.mc_reps, a.mc_reps);
    set(&mut c.spectrum_draws, a.spectrum_draws);
    set(&mut c.seed, a.seed);
    Ok(c)
}

fn resolve_concentration(a: ConcentrationArgs) -> Result<ConcentrationConfig> {
    let mut c: ConcentrationConfig = load_toml(a.common.config.as_deref())?;
    set(&mut c.prior, a.prior);
    set(&mut c.p_list, a.p_list);
    set(&mut c.draws, a.draws);
    set(&mut c.a, a.a);
    set(&mut c.seed, a.seed);
    Ok(c)
}

fn resolve_spectra(a: SpectraArgs) -> Result<SpectraConfig> {
    let mut c: SpectraConfig = load_toml(a.common.config.as_deref())?;
    set(&mut c.r, a.r);
    set(&mut c.n, a.n);
    set(&mut c.cov, a.cov);
    set(&mut c.latent_dim, a.latent_dim);
    set(&mut c.sigma_x, a.sigma_x);
    set(&mut c.bins, a.bins);
    set(&mut c.lambdas, a.lambdas);
    set(&mut c.seed, a.seed);
    Ok(c)
}

const DEFAULT_OUT: &str = "ignorability-out";

/// Parse arguments, run, and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(files) => {
            for f in files {
                println!("wrote {}", f.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) | Error::UnsupportedRegime(_) | Error::OutOfDomain(_) | Error::Io(_) => 2,
        Error::StudyAborted { .. } => 3,
        _ => 4,
    }
}

fn dispatch(cmd: Command) -> Result<Vec<PathBuf>> {
    let (config, out) = match cmd {
        Command::Simulate(a) => {
            let out = a.common.out.clone();
            (RunConfig::Simulate(resolve_simulate(a)?), out)
        }
        Command::BiasCurve(a) => {
            let out = a.common.out.clone();
            (RunConfig::BiasCurve(resolve_bias_curve(a)?), out)
        }
        Command::Concentration(a) => {
            let out = a.common.out.clone();
            (RunConfig::Concentration(resolve_concentration(a)?), out)
        }
        Command::Spectra(a) => {
            let out = a.common.out.clone();
            (RunConfig::Spectra(resolve_spectra(a)?), out)
        }
        Command::Replay(a) => {
            let config = read_manifest_config(&a.manifest)?;
            return execute(&config, &a.out);
        }
    };
    execute(&config, &out.unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)))
}

/// Read the resolved configuration stored in a manifest.
pub fn read_manifest_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::arg(format!("cannot read manifest {}: {e}", path.display())))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::arg(format!("manifest: {e}")))?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(Error::arg(format!(
            "manifest schema version {} is not {SCHEMA_VERSION}",
            m.schema_version
        )));
    }
    RunConfig::from_json(&m.command, m.config)
}

/// Run a resolved command, writing its files and manifest into `out`.
pub fn execute(config: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out)?;
    let outputs = match config {
        RunConfig::Simulate(c) => simulate(c)?,
        RunConfig::BiasCurve(c) => bias_curve(c)?,
        RunConfig::Concentration(c) => concentration(c)?,
        RunConfig::Spectra(c) => spectra_cmd(c)?,
    };
    let mut written = Vec::new();
    let mut names = Vec::new();
    let mut abort = None;
    for f in &outputs.files {
        let path = out.join(f.name);
        write_atomic(&path, &f.bytes)?;
        names.push(f.name.to_string());
        written.push(path);
    }
    if let Some(e) = outputs.abort {
        abort = Some(e);
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        timestamp_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        command: config.command().to_string(),
        base_seed: config.seed(),
        config: config.to_json()?,
        files: names,
        notes: outputs.notes,
    };
    let path = out.join(MANIFEST_FILE);
    write_atomic(&path, &serde_json::to_vec_pretty(&manifest)?)?;
    written.push(path);
    match abort {
        Some(e) => Err(e),
        None => Ok(written),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

struct OutFile {
    name: &'static str,
    bytes: Vec<u8>,
}

#[derive(Default)]
struct Outputs {
    files: Vec<OutFile>,
    notes: Vec<String>,
    /// Error to report after the files and manifest are written.
    abort: Option<Error>,
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn records_csv(records: &[ReplicationRecord], timing: bool) -> Result<Vec<u8>> {
    csv_bytes(
        &RECORDS_COLUMNS,
        records.iter().map(|r| {
            vec![
                r.study.tag().to_string(),
                r.setting.clone(),
                r.method.clone(),
                r.rep.to_string(),
                r.seed.to_string(),
                num(r.estimate),
                num(r.post_sd),
                num(r.ci_lo),
                num(r.ci_hi),
                num(r.truth),
                if timing { num(r.elapsed_s) } else { String::new() },
                r.status.clone(),
            ]
        }),
    )
}

pub fn summary_csv(report: &SummaryReport) -> Result<Vec<u8>> {
    csv_bytes(
        &SUMMARY_COLUMNS,
        report.rows.iter().map(|r| {
            vec![
                r.study.tag().to_string(),
                r.setting.clone(),
                r.method.clone(),
                r.n_reps.to_string(),
                num(r.coverage),
                num(r.coverage_mcse),
                num(r.mean_width),
                num(r.mean_post_sd),
                num(r.rmse),
                num(r.rmse_mcse),
                num(r.bias),
                num(r.bias_mcse),
            ]
        }),
    )
}

/// Setting tag of a factor or manifold run at covariate noise `sx`.
pub fn sigma_setting(sx: f64) -> String {
    format!("sigma_x={sx}")
}

/// The six-point noise grid `2^j`, `j` evenly spaced in `[-7, -2]`.
pub fn manifold_sigma_grid() -> Vec<f64> {
    (0..6).map(|k| 2f64.powf(-7.0 + k as f64)).collect()
}

/// Study specs for every requested setting of a simulate run.
pub fn simulate_specs(c: &SimulateConfig) -> Result<Vec<StudySpec>> {
    let study = c.study.ok_or_else(|| Error::arg("simulate needs --study"))?;
    let (dn, dp) = study.default_dims();
    let params = StudyParams {
        lambda: c.lambda,
        sigma_x: None,
        latent_dim: c.latent_dim,
        first_stage: c.first_stage,
        iterations: c.iterations,
        burn_in: c.burn_in,
    };
    let base = StudySpec {
        study,
        setting: String::new(),
        n: c.n.unwrap_or(dn),
        p: c.p.unwrap_or(dp),
        reps: c.reps,
        base_seed: c.seed,
        methods: if c.methods.is_empty() {
            study.methods().iter().map(|m| m.to_string()).collect()
        } else {
            c.methods.clone()
        },
        params,
    };
    let specs: Vec<StudySpec> = match study {
        Study::Factor | Study::Manifold => {
            if !c.settings.is_empty() {
                return Err(Error::arg(format!(
                    "study '{study}' takes its settings from sigma_x, not --setting"
                )));
            }
            let grid = if !c.sigma_x.is_empty() {
                c.sigma_x.clone()
            } else if study == Study::Factor {
                vec![0.05, 1.0]
            } else {
                manifold_sigma_grid()
            };
            grid.into_iter()
                .map(|sx| {
                    let mut s = base.clone();
                    s.setting = sigma_setting(sx);
                    s.params.sigma_x = Some(sx);
                    s
                })
                .collect()
        }
        _ => {
            if !c.sigma_x.is_empty() {
                return Err(Error::arg(format!("study '{study}' does not take sigma_x")));
            }
            let settings = if c.settings.is_empty() { study.settings() } else { c.settings.clone() };
            settings
                .into_iter()
                .map(|t| {
                    let mut s = base.clone();
                    s.setting = t;
                    s
                })
                .collect()
        }
    };
    for s in &specs {
        s.validate()?;
    }
    if c.workers == 0 {
        return Err(Error::arg("workers must be positive"));
    }
    Ok(specs)
}

fn simulate(c: &SimulateConfig) -> Result<Outputs> {
    let specs = simulate_specs(c)?;
    let mut records = Vec::new();
    let mut abort = None;
    for spec in &specs {
        let recs = simlab::run_replications(spec, c.workers)?;
        if let Err(e) = simlab::check_failures(&recs) {
            abort.get_or_insert(e);
        }
        records.extend(recs);
    }
    let mut out = Outputs::default();
    out.files.push(OutFile {
        name: "records.csv",
        bytes: records_csv(&records, c.timing)?,
    });
    if specs[0].study == Study::Ridge {
        out.notes
            .push("ridge setting 'fixed' uses gamma = 2, omega = -gamma/4; alternate label omega = gamma/4".into());
    }
    match abort {
        Some(e) => out.abort = Some(e),
        None => out.files.push(OutFile {
            name: "summary.csv",
            bytes: summary_csv(&simlab::summarize(&records)?)?,
        }),
    }
    Ok(out)
}

fn bias_curve(c: &BiasCurveConfig) -> Result<Outputs> {
    if c.lambdas.is_empty() || c.lambdas.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
        return Err(Error::arg("the penalty grid must be non-empty and positive"));
    }
    if !(c.r > 0.0 && c.r.is_finite()) {
        return Err(Error::arg("r must be positive"));
    }
    let p = (c.r * c.n as f64).round() as usize;
    let design = BiasDesign::new(c.n, p, c.eta, c.omega0)?;
    let (zprior, est) = match c.estimator.as_str() {
        "naive" => (false, BiasEstimator::Naive),
        "zprior" => {
            let fs = match c.first_stage.as_str() {
                "shared" => BiasEstimator::SHARED_PENALTY,
                "empirical_bayes" => BiasEstimator::ZPrior(FirstStage::EmpiricalBayes),
                "oracle" => BiasEstimator::ZPrior(FirstStage::Oracle),
                other => return Err(Error::arg(format!("unknown first stage '{other}'"))),
            };
            (true, fs)
        }
        other => return Err(Error::arg(format!("unknown estimator '{other}' (expected naive or zprior)"))),
    };
    let formula = bias_mc::bias_formula(&design, &c.lambdas, zprior, c.spectrum_draws, c.seed)?;
    let mc = if c.with_mc {
        Some(bias_mc::bias_monte_carlo(&design, &c.lambdas, est, c.mc_reps, c.seed)?)
    } else {
        None
    };
    let rows = c.lambdas.iter().enumerate().map(|(k, &l)| {
        let m = mc.as_ref().map(|m| m[k]);
        vec![num(l), num(formula[k]), opt_num(m.map(|m| m.estimate)), opt_num(m.map(|m| m.mc_se))]
    });
    let mut out = Outputs::default();
    out.files.push(OutFile {
        name: "bias_curve.csv",
        bytes: csv_bytes(&BIAS_CURVE_COLUMNS, rows)?,
    });
    out.notes.push(format!("P = {p}, tau2 = {}", design.tau2()));
    Ok(out)
}

fn concentration_prior(c: &ConcentrationConfig, p: usize) -> Result<PriorSpec> {
    match c.prior.as_str() {
        "ridge" => Ok(PriorSpec::ridge(c.tau2_beta, c.tau2_phi)),
        "spike_slab" => Ok(PriorSpec::spike_slab(c.inclusion, c.inclusion, c.tau2_beta, c.tau2_phi)),
        "gp" => {
            let kernel = selection_bias::gaussian_kernel_isotropic(1.0)?;
            let scale = 1.0 / (p as f64).sqrt();
            let propensity: selection_bias::Surface =
                std::sync::Arc::new(move |x: &[f64]| stats::normal_cdf(scale * x.iter().sum::<f64>()));
            Ok(PriorSpec::gp(kernel, c.tau2_beta, propensity, c.design_points))
        }
        other => Err(Error::arg(format!("unsupported prior '{other}' (expected ridge, spike_slab or gp)"))),
    }
}

fn concentration(c: &ConcentrationConfig) -> Result<Outputs> {
    if c.p_list.is_empty() || c.p_list.contains(&0) {
        return Err(Error::arg("the dimension list must be non-empty and positive"));
    }
    let mut draw_rows = Vec::new();
    let mut summary_rows = Vec::new();
    for &p in &c.p_list {
        let prior = concentration_prior(c, p)?;
        let cov = CovarianceModel::identity(p);
        let seed = rng::derive_seed(c.seed, &["concentration", &c.prior], p as u64);
        let draws = selection_bias::prior_delta_draws(&prior, &cov, c.a, c.draws, seed)?;
        for (i, d) in draws.iter().enumerate() {
            draw_rows.push(vec![p.to_string(), i.to_string(), num(*d)]);
        }
        let sd = stats::sd(&draws);
        let predicted = if c.prior == "ridge" {
            let spec = spectra::SpectrumSummary::from_eigenvalues(vec![1.0; p])?;
            Some(selection_bias::clt_scale(c.a, &prior, &spec)?.sqrt())
        } else {
            None
        };
        summary_rows.push(vec![
            p.to_string(),
            c.draws.to_string(),
            num(sd),
            opt_num(predicted),
            opt_num(predicted.map(|q| sd / q)),
        ]);
    }
    let mut out = Outputs::default();
    out.files.push(OutFile {
        name: "concentration_draws.csv",
        bytes: csv_bytes(&CONCENTRATION_DRAW_COLUMNS, draw_rows)?,
    });
    out.files.push(OutFile {
        name: "concentration_summary.csv",
        bytes: csv_bytes(&CONCENTRATION_SUMMARY_COLUMNS, summary_rows)?,
    });
    if c.prior == "gp" {
        out.notes.push(
            "gp prior: beta ~ GP(0, tau2_beta exp(-|x-x'|^2/2)), fixed propensity Phi(sum(x)/sqrt(P)); stands in for a tree-ensemble prior".into(),
        );
    }
    Ok(out)
}

fn spectra_cmd(c: &SpectraConfig) -> Result<Outputs> {
    if !(c.r > 0.0 && c.r.is_finite()) || c.n < 2 || c.bins == 0 {
        return Err(Error::arg("spectra needs r > 0, N >= 2 and at least one bin"));
    }
    if c.lambdas.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
        return Err(Error::arg("penalties must be positive"));
    }
    let p = (c.r * c.n as f64).round() as usize;
    let mut s = rng::stream(rng::derive_seed(c.seed, &["spectra", &c.cov], 0));
    let x = match c.cov.as_str() {
        "identity" => linalg::normal_matrix(c.n, p, &mut s),
        "factor" => {
            if c.latent_dim == 0 || c.latent_dim > p {
                return Err(Error::arg("latent_dim must lie in 1..=P"));
            }
            let loadings = linalg::normal_matrix(p, c.latent_dim, &mut s);
            CovarianceModel::latent_factor(loadings, c.sigma_x)?.sample_rows(c.n, &mut s)?
        }
        other => return Err(Error::arg(format!("unknown covariance '{other}' (expected identity or factor)"))),
    };
    let (f, _) = spectra::sample_spectra(&x)?;
    let mut out = Outputs::default();
    if c.cov == "identity" {
        // the law of XXᵀ/P, i.e. F rescaled by N/P
        let scaled: Vec<f64> = f.eigenvalues().iter().map(|e| e * c.n as f64 / p as f64).collect();
        let bins = spectra::mp_histogram(&scaled, c.r, c.bins)?;
        out.notes.push(format!("l1_distance = {}", num(spectra::mp_l1_distance(&bins))));
        let rows = bins
            .iter()
            .map(|b| vec![num(b.lo), num(b.hi), num(b.empirical), num(b.theoretical)]);
        out.files.push(OutFile {
            name: "spectra_histogram.csv",
            bytes: csv_bytes(&HISTOGRAM_COLUMNS, rows)?,
        });
    } else {
        let ev = f.eigenvalues();
        let hi = ev.iter().cloned().fold(0.0, f64::max);
        let w = if hi > 0.0 { hi / c.bins as f64 } else { 1.0 };
        let mut counts = vec![0usize; c.bins];
        for e in ev {
            counts[((e / w) as usize).min(c.bins - 1)] += 1;
        }
        let rows = counts.iter().enumerate().map(|(k, n)| {
            vec![
                num(k as f64 * w),
                num((k + 1) as f64 * w),
                num(*n as f64 / ev.len() as f64),
                String::new(),
            ]
        });
        out.files.push(OutFile {
            name: "spectra_histogram.csv",
            bytes: csv_bytes(&HISTOGRAM_COLUMNS, rows)?,
        });
    }
    let rows = c
        .lambdas
        .iter()
        .map(|&l| Ok(vec![num(l), num(spectra::stieltjes(&f, l)?), num(1.0 / l)]))
        .collect::<Result<Vec<_>>>()?;
    out.files.push(OutFile {
        name: "stieltjes.csv",
        bytes: csv_bytes(&STIELTJES_COLUMNS, rows)?,
    });
    Ok(out)
}
