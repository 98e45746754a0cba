use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: invalid json: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("annotation references unknown category id {0}")]
    UnknownCategory(i64),

    #[error("annotation references unknown image id {0}")]
    UnknownImage(i64),

    #[error("duplicate image id {0}")]
    DuplicateImage(i64),

    #[error("invalid box {0:?}: requires x_min < x_max and y_min < y_max")]
    InvalidBox([f64; 4]),

    #[error("class index {index} out of range for {num_classes} classes")]
    ClassOutOfRange { index: i64, num_classes: usize },

    #[error("prior entry ({row}, {col}) = {value} outside [0, 1]")]
    PriorBounds { row: usize, col: usize, value: f64 },

    #[error("prior is not symmetric at ({row}, {col}): {a} vs {b}")]
    PriorAsymmetric { row: usize, col: usize, a: f64, b: f64 },

    #[error("row {row} of class probabilities is not on the simplex (sum {sum})")]
    NotStochastic { row: usize, sum: f64 },

    #[error("edge matrix invalid at ({row}, {col}): {reason}")]
    InvalidEdges {
        row: usize,
        col: usize,
        reason: &'static str,
    },

    #[error("sinkhorn input has an all-zero {axis} at index {index}")]
    Disconnected { axis: &'static str, index: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid config: {0}")]
    Config(String),
}

impl Error {
    /// Short machine-readable class name, used as the CLI error prefix.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Io { .. } => "io",
            Error::Json { .. } | Error::Parse { .. } => "parse",
            Error::UnknownCategory(_)
            | Error::UnknownImage(_)
            | Error::DuplicateImage(_)
            | Error::InvalidBox(_)
            | Error::ClassOutOfRange { .. } => "annotations",
            Error::PriorBounds { .. } | Error::PriorAsymmetric { .. } => "prior",
            Error::NotStochastic { .. } | Error::InvalidEdges { .. } => "graph",
            Error::Disconnected { .. } => "sinkhorn",
            Error::NonFinite(_) => "non_finite",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config(_) => "config",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
