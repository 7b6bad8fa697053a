use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("covariance matrix is not positive definite")]
    SingularCovariance,

    #[error("invalid dropout sequence for subject {id} at occasion {t}")]
    InvalidDropout { id: String, t: usize },

    #[error("observed response on a dropout row for subject {id} at occasion {t}")]
    InconsistentRow { id: String, t: usize },

    #[error("parse error on line {line}: {msg}")]
    ParseError { line: u64, msg: String },

    #[error("state {0} has (near) zero expected occupancy")]
    DegenerateComponent(usize),

    #[error("Newton-Raphson did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NewtonFailed { iterations: usize, grad_norm: f64 },

    #[error("observation has zero probability under every state at occasion {t}")]
    ImpossibleObservation { t: usize },

    #[error("all starts failed: {0}")]
    FitFailed(String),

    #[error("bootstrap failed: only {converged} of {total} replicates converged")]
    BootstrapFailed { converged: usize, total: usize },
}

impl Error {
    /// Short variant name, used for CLI diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "InvalidInput",
            Error::SingularCovariance => "SingularCovariance",
            Error::InvalidDropout { .. } => "InvalidDropout",
            Error::InconsistentRow { .. } => "InconsistentRow",
            Error::ParseError { .. } => "ParseError",
            Error::DegenerateComponent(_) => "DegenerateComponent",
            Error::NewtonFailed { .. } => "NewtonFailed",
            Error::ImpossibleObservation { .. } => "ImpossibleObservation",
            Error::FitFailed(_) => "FitFailed",
            Error::BootstrapFailed { .. } => "BootstrapFailed",
        }
    }

    /// True for errors caused by malformed input rather than estimation trouble.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_)
                | Error::InvalidDropout { .. }
                | Error::InconsistentRow { .. }
                | Error::ParseError { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
