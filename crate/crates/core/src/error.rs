use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid demonstration: {0}")]
    Validation(String),

    #[error("degenerate segment: {0}")]
    DegenerateSegment(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid waypoints: {0}")]
    Waypoint(String),

    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },

    #[error("{op} has no second derivative and cannot be differentiated through")]
    UnsupportedSecondDerivative { op: &'static str },

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput([usize; 2]),

    #[error("rollout diverged at step {step}")]
    Divergence { step: usize },

    #[error("training produced a non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("quaternion is not unit norm (|q| = {norm})")]
    NonUnitQuaternion { norm: f64 },

    #[error("model file: {0}")]
    Model(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn from_json(err: serde_json::Error) -> Self {
        Error::Parse {
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }
}
