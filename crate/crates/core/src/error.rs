use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid resolution {0}: need at least 2 cells per axis")]
    InvalidResolution(usize),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("invalid state: {0}")]
    State(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("edge has no zero crossing (s_a = {s_a}, s_b = {s_b})")]
    NoCrossing { s_a: f64, s_b: f64 },

    #[error("division by zero: {0}")]
    Division(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("face index {index} out of range at line {line} ({count} vertices)")]
    Index {
        line: usize,
        index: i64,
        count: usize,
    },

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("visibility error: {0}")]
    Visibility(String),

    #[error("optimization diverged at iteration {iteration}")]
    Divergence { iteration: usize, trace: Vec<f64> },

    #[error("non-finite value at step {step}")]
    Numeric { step: usize },

    #[error("loss undefined: {0}")]
    UndefinedLoss(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("batch failed: all {0} items failed")]
    Batch(usize),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
