use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tensor does not belong to the active tape")]
    Detached,

    #[error("volume dim {dim} on axis {axis} is not divisible by patch extent {patch}")]
    NonDivisible { axis: char, dim: usize, patch: usize },

    #[error("affine transform is not invertible (|det| = {0:e})")]
    NonInvertible(f64),

    #[error("token {index} has zero norm")]
    ZeroNormToken { index: usize },

    #[error("{what} is not unit-normalized (norm {norm})")]
    NotNormalized { what: String, norm: f64 },

    #[error("{what}: need at least {min} elements, got {got}")]
    TooFewElements {
        what: &'static str,
        min: usize,
        got: usize,
    },

    #[error("volume has no label channel")]
    MissingLabels,

    #[error("silhouette needs at least two distinct labels, got {0}")]
    TooFewLabels(usize),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid scene: {0}")]
    Scene(String),

    #[error("non-finite {term} loss for batch item {item} at step {step}")]
    NonFiniteLoss {
        term: &'static str,
        item: usize,
        step: u64,
    },

    #[error("malformed {format} data: {reason}")]
    Format {
        format: &'static str,
        reason: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(format: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            format,
            reason: reason.into(),
        }
    }

    /// True for errors caused by user input (bad config, missing files,
    /// malformed data) as opposed to internal failures.
    pub fn is_user_error(&self) -> bool {
        !matches!(
            self,
            Error::Detached | Error::NonScalarLoss(_) | Error::NonFiniteLoss { .. }
        )
    }
}
