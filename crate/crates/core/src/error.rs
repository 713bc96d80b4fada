use thiserror::Error;

/// Errors surfaced by model fitting, simulation and file handling.
#[derive(Debug, Error)]
pub enum Error {
    #[error("no covariate history at t = {t} (path starts at {start})")]
    NoCovariateHistory { t: f64, start: f64 },

    #[error("degenerate risk set at event time {time}")]
    DegenerateRiskSet { time: f64 },

    #[error("singular information matrix (Levenberg damping exhausted)")]
    SingularInformation,

    #[error("MPPLE requires time-independent covariates")]
    TimeVaryingNotSupported,

    #[error("bootstrap unstable: {failed} of {total} replicates failed to converge")]
    BootstrapUnstable { failed: usize, total: usize },

    #[error("SIMEX grid unstable: fewer than half of the naive fits converged at zeta = {zeta}")]
    SimexGridUnstable { zeta: f64 },

    #[error("no comparable pairs for the concordance index")]
    NoComparablePairs,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for configuration/schema problems,
    /// 3 for internal numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_)
            | Error::Schema { .. }
            | Error::InvalidInput(_)
            | Error::Csv(_)
            | Error::Json(_)
            | Error::TimeVaryingNotSupported => 2,
            _ => 3,
        }
    }
}
