use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("simulation diverged at step {step}")]
    Diverged { step: usize },

    #[error("data generation failed: {0}")]
    Generation(String),

    #[error("verification ratio undefined: {0}")]
    UndefinedRatio(String),

    #[error("no sweep record reaches verification {threshold}; best achievable is {best}")]
    InfeasibleSelection { threshold: f64, best: f64 },

    #[error("empty evaluation set")]
    Empty,

    #[error("unsupported checkpoint version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(
        context: impl Into<String>,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::Dimension {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Short stable tag used in the CLI's machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::NonFinite(_) => "non_finite",
            Error::Contract(_) => "contract",
            Error::Config { .. } => "config",
            Error::Diverged { .. } => "diverged",
            Error::Generation(_) => "generation",
            Error::UndefinedRatio(_) => "undefined_ratio",
            Error::InfeasibleSelection { .. } => "infeasible_selection",
            Error::Empty => "empty",
            Error::UnsupportedVersion { .. } => "unsupported_version",
            Error::Corrupt(_) => "corrupt",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
        }
    }
}
