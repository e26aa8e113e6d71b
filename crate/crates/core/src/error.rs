use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input violates a documented contract (bad config, malformed study, ...).
    #[error("validation: {0}")]
    Validation(String),

    #[error("schema violation at `{path}`: {message}")]
    Schema { path: String, message: String },

    #[error("simulation failure at step {step}: {reason}")]
    SimulationFailure { step: usize, reason: String },

    #[error("degenerate trajectory: {0}")]
    DegenerateTrajectory(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Cholesky failure after the full jitter ladder.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: String },

    #[error("integration failure at step {step}: non-finite state")]
    Integration { step: usize },

    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(context: impl Into<String>, expected: &[usize], got: &[usize]) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SimulationFailure { .. }
                | Error::Numerical(_)
                | Error::NonFinite { .. }
                | Error::Integration { .. }
        )
    }

    /// Stable machine-parseable prefix used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Validation(_) => "validation",
            Error::Schema { .. } => "schema",
            Error::SimulationFailure { .. } => "simulation",
            Error::DegenerateTrajectory(_) => "degenerate",
            Error::InsufficientData(_) => "insufficient-data",
            Error::Numerical(_) => "numerical",
            Error::NonFinite { .. } => "non-finite",
            Error::Integration { .. } => "integration",
            Error::Shape { .. } => "shape",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
