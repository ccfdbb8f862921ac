use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(
        "numerical failure: {message} (n = {size}, smallest pivot^2 = {min_pivot:e}, diagonal ratio = {diag_ratio:e})"
    )]
    Numerical {
        message: String,
        size: usize,
        min_pivot: f64,
        diag_ratio: f64,
    },

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("problem too large to enumerate: {measured} augmented states (limit {limit})")]
    SizeGuard { measured: usize, limit: usize },

    #[error("evaluator failed: {0}")]
    Evaluator(String),

    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },

    #[error("config error in {path}: field `{field}`: {message}")]
    Config {
        path: PathBuf,
        field: String,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
