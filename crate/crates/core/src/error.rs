use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every public operation in the crate.
#[derive(Debug, Error)]
pub enum AaqError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("format error in `{field}`: {reason}")]
    Format { field: String, reason: String },

    #[error("fixture generation failed after {attempts} attempts: {diagnostics}")]
    Fixture { attempts: u32, diagnostics: String },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss {
        step: usize,
        snapshot: Box<crate::pipeline::RunState>,
    },

    #[error("config error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl AaqError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        AaqError::Shape(msg.into())
    }

    pub(crate) fn format(field: impl Into<String>, reason: impl Into<String>) -> Self {
        AaqError::Format {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        AaqError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AaqError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, AaqError>;
