use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported regime: {0}")]
    UnsupportedRegime(String),

    #[error("out of domain: {0}")]
    OutOfDomain(String),

    /// A closed-form expression hit a (near) zero denominator.
    #[error("numerical degeneracy: {0}")]
    NumericalDegeneracy(String),

    /// The unpenalized block of a design is not of full column rank.
    #[error("identifiability: {0}")]
    Identifiability(String),

    /// Factorization failure, non-finite likelihood, failed optimizer.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("degenerate propensity: sample mean {0:e} is below 1e-6")]
    DegeneratePropensity(f64),

    #[error("degenerate spectrum: mean eigenvalue is zero")]
    DegenerateSpectrum,

    #[error("degenerate knots: {distinct} distinct values, {required} required")]
    DegenerateKnots { distinct: usize, required: usize },

    #[error("degenerate pilot fit: fitted exposure mean has zero variance")]
    DegeneratePilot,

    #[error("insufficient sample: {got} draws, at least {need} required")]
    InsufficientSample { got: usize, need: usize },

    #[error("missing group: {0}")]
    MissingGroup(String),

    #[error("study aborted: {failed} of {total} replications failed")]
    StudyAborted { failed: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Short machine-readable tag, used in the `status` column of records.
    pub fn tag(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::UnsupportedRegime(_) => "unsupported_regime",
            Error::OutOfDomain(_) => "out_of_domain",
            Error::NumericalDegeneracy(_) => "numerical_degeneracy",
            Error::Identifiability(_) => "identifiability",
            Error::Numeric(_) => "numeric",
            Error::DegeneratePropensity(_) => "degenerate_propensity",
            Error::DegenerateSpectrum => "degenerate_spectrum",
            Error::DegenerateKnots { .. } => "degenerate_knots",
            Error::DegeneratePilot => "degenerate_pilot",
            Error::InsufficientSample { .. } => "insufficient_sample",
            Error::MissingGroup(_) => "missing_group",
            Error::StudyAborted { .. } => "study_aborted",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
