use thiserror::Error;

pub type Result<T> = std::result::Result<T, CovapError>;

#[derive(Debug, Error)]
pub enum CovapError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    /// A ratio whose denominator is zero, e.g. CCR with no backward compute.
    #[error("undefined ratio: {0}")]
    UndefinedRatio(String),

    #[error(
        "incomplete profile: no trace events for worker {worker} (expected {expected} workers)"
    )]
    IncompleteProfile { worker: usize, expected: usize },

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("training diverged at step {step} (loss = {loss})")]
    Divergence { step: u64, loss: f64 },

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CovapError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        CovapError::InvalidInput(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        CovapError::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl CovapError {
    /// Process exit status: 2 bad config or input, 3 divergence, 4 broken
    /// invariant, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CovapError::Config { .. }
            | CovapError::Json(_)
            | CovapError::InvalidInput(_)
            | CovapError::UndefinedRatio(_) => 2,
            CovapError::Divergence { .. } => 3,
            CovapError::Invariant(_) | CovapError::InvalidState(_) => 4,
            _ => 1,
        }
    }
}
