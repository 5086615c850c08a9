use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HseError>;

#[derive(Debug, Error)]
pub enum HseError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("index {index} out of range for {what} of size {size}")]
    OutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("numeric check failed: {0}")]
    CheckFailed(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("taxonomy error: {0}")]
    Taxonomy(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("unresolved category at row {row}: {msg}")]
    UnresolvedCategory { row: usize, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("image error in {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HseError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        HseError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HseError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            HseError::InvalidArgument(_) | HseError::Config(_) => 1,
            HseError::Shape { .. } | HseError::NonFinite(_) | HseError::CheckFailed(_) | HseError::Graph(_) => 3,
            _ => 2,
        }
    }
}
