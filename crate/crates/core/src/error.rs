use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// Each variant maps to a stable machine-readable kind (see [`Error::kind`]),
/// which the command-line front end prints on failure.
#[derive(Debug, Error)]
pub enum Error {
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("integrity error in {path}: {msg}")]
    Integrity { path: PathBuf, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("index ({row}, {col}) outside {height}x{width} cube")]
    Bounds {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },

    #[error("class {class}: requested {requested} samples but only {available} labeled pixels")]
    InsufficientSamples {
        class: u16,
        requested: usize,
        available: usize,
    },

    #[error("non-finite value in layer `{layer}`")]
    Numeric { layer: String },

    #[error("training diverged at epoch {epoch}, step {step}: {msg}")]
    Diverged { epoch: usize, step: usize, msg: String },

    #[error("config not found: {0}")]
    ConfigNotFound(PathBuf),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Format { .. } => "format",
            Error::Integrity { .. } => "integrity",
            Error::Validation(_) => "validation",
            Error::Argument(_) => "argument",
            Error::Bounds { .. } => "bounds",
            Error::InsufficientSamples { .. } => "insufficient_samples",
            Error::Numeric { .. } => "numeric",
            Error::Diverged { .. } => "diverged",
            Error::ConfigNotFound(_) => "config_not_found",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
