use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate.
///
/// The variants line up with the CLI exit codes: configuration problems exit
/// with 2, data problems with 3 and numeric divergence with 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("phantom spec error: {0}")]
    Spec(String),

    #[error("numeric divergence at epoch {epoch}, step {step}: {detail}")]
    Divergence {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("layer `{layer}` does not match: {detail}")]
    LayerMismatch { layer: String, detail: String },

    #[error("unsupported variant: {0}")]
    UnsupportedVariant(String),

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Spec(_) | Error::UnsupportedVariant(_) => 2,
            Error::LayerMismatch { .. } => 2,
            Error::Data(_) | Error::Format { .. } => 3,
            Error::Divergence { .. } => 4,
            Error::Dimension { .. } | Error::Contract(_) | Error::Io { .. } => 1,
        }
    }
}
