use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid observation: {0}")]
    InvalidObservation(String),

    #[error("dimension mismatch: expected {expected}, got {found} ({context})")]
    Dimension {
        expected: usize,
        found: usize,
        context: &'static str,
    },

    #[error(
        "positivity violation: propensity {propensity:e} outside ({eps:e}, 1 - {eps:e}) \
         at observation {observation}{}",
        batch.map(|b| format!(" of batch {b}")).unwrap_or_default()
    )]
    Positivity {
        batch: Option<u64>,
        observation: usize,
        propensity: f64,
        eps: f64,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("singular {what} (condition estimate {condition:e})")]
    Singular { what: &'static str, condition: f64 },

    #[error(
        "newton iteration did not converge after {iterations} iterations \
         (last step max-norm {step_norm:e}, residual max-norm {residual_norm:e})"
    )]
    NonConvergence {
        iterations: usize,
        step_norm: f64,
        residual_norm: f64,
        last_iterate: Vec<f64>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("monitor already terminated with decision {0:?}")]
    MonitorTerminated(crate::sequential::Decision),

    #[error("zero or non-finite variance for the treatment effect")]
    ZeroVariance,

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },

    #[error("state file checksum mismatch (stored {stored}, computed {computed})")]
    Checksum { stored: String, computed: String },

    #[error("state file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable tag, used in the CLI's JSON error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidObservation(_) => "invalid_observation",
            Error::Dimension { .. } => "dimension",
            Error::Positivity { .. } => "positivity",
            Error::NonFinite(_) => "non_finite",
            Error::Singular { .. } => "singular",
            Error::NonConvergence { .. } => "non_convergence",
            Error::Config(_) => "config",
            Error::MonitorTerminated(_) => "monitor_terminated",
            Error::ZeroVariance => "zero_variance",
            Error::Parse { .. } => "parse",
            Error::Checksum { .. } => "checksum",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
