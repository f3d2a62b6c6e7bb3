use thiserror::Error;

/// Errors produced by the toolkit.
///
/// `Format`, `Invariant` and `Config` are validation-class failures
/// (CLI exit code 2); `Numeric` covers solver breakdowns (exit code 3).
#[derive(Debug, Error)]
pub enum StmError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, StmError>;

impl StmError {
    pub fn format(msg: impl Into<String>) -> Self {
        StmError::Format(msg.into())
    }
    pub fn invariant(msg: impl Into<String>) -> Self {
        StmError::Invariant(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        StmError::Config(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        StmError::Numeric(msg.into())
    }

    /// Process exit code for the CLI: 2 for validation problems, 3 for
    /// numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            StmError::Numeric(_) => 3,
            _ => 2,
        }
    }
}
