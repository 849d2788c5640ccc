use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("{what}: expected length {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("product measure would have {size} points, above the cap of {cap}")]
    ProductTooLarge { size: usize, cap: usize },

    /// A numerical guard tripped during integration (divergence, loss increase).
    #[error("numerical guard: {0}")]
    NumericalGuard(String),

    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("singular covariance matrix: monomial family is degenerate")]
    SingularCovariance,

    #[error("eigensolver failed: {0}")]
    Eigen(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{}:{line}: {msg}", file.display())]
    CorruptArtifact {
        file: PathBuf,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code: 2 for numerical aborts, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NumericalGuard(_)
            | Error::NotConverged { .. }
            | Error::SingularCovariance
            | Error::Eigen(_) => 2,
            _ => 1,
        }
    }
}
