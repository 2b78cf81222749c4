use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("unresolved measurement `{0}`")]
    UnresolvedMeasurement(String),

    #[error("unbound measurement `{0}`: supply a binding for it")]
    UnboundMeasurement(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("data error in {path} at row {row}: {msg}")]
    Data { path: PathBuf, row: usize, msg: String },

    #[error("solver error: {0}")]
    Solver(String),

    #[error("training failed at outer iteration {outer_iter}: {msg}")]
    Training { outer_iter: usize, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
