use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("task index {index} out of range 1..={max}")]
    TaskIndex { index: usize, max: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("ground-truth generation failed: diversity check did not pass after {attempts} attempts")]
    GenerationFailed { attempts: usize },

    #[error("singular normal equations (pooled covariance not invertible; try ridge > 0)")]
    Singular,

    #[error("divergence at iteration {iteration}: loss {loss:e} (initial {initial:e})")]
    Divergence {
        iteration: usize,
        loss: f64,
        initial: f64,
    },

    #[error("problem too large: Hessian order {order} exceeds limit {limit}")]
    TooLarge { order: usize, limit: usize },

    #[error(
        "full epsilon-net infeasible for flattened dimension {dim} (limit 8); it would need about {points:.3e} points"
    )]
    NetInfeasible { dim: usize, points: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error at {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("plot error: {0}")]
    Plot(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
