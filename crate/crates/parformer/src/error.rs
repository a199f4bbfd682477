//! Error type shared across the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes that cannot be combined. Both shapes are named so the
    /// message is actionable without a debugger.
    #[error("dimension mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Dimension {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// A caller broke an operation precondition (bad index, non-binary label,
    /// NaN gradient, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed manifest line.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Structurally valid input that contradicts the configured schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// Checkpoint or other artifact failed its integrity check.
    #[error("corrupt artifact: {0}")]
    Corrupt(String),

    /// A verification command (gradient check) found mismatches.
    #[error("verification failed: {0}")]
    Verification(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dimension(context: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        Error::Dimension {
            context: context.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    /// Process exit code for the CLI: 0 success, 2 config/schema,
    /// 3 artifact corruption, 4 verification failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Contract(_)
            | Error::Schema(_)
            | Error::Parse { .. }
            | Error::Dimension { .. } => 2,
            Error::Corrupt(_) => 3,
            Error::Verification(_) => 4,
            Error::Io(_) => 1,
        }
    }
}
