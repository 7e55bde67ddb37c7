use thiserror::Error;

/// Errors produced anywhere in the lab.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates its documented constraints.
    #[error("configuration error: {0}")]
    Config(String),
    /// Caller-supplied data has the wrong shape or content.
    #[error("input error: {0}")]
    Input(String),
    /// The sequence would exceed the model's context window.
    #[error("capacity error: position {position} exceeds max_context {max_context}")]
    Capacity { position: usize, max_context: usize },
    /// A NaN or infinity appeared where a finite value is required.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// An attention hook returned a replacement that breaks shape or causality.
    #[error("hook rejected: {0}")]
    Hook(String),
    /// A metric denominator is zero.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the command-line front end: 3 for numeric
    /// failures, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
