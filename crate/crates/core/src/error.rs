use std::path::PathBuf;

/// Errors raised across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invariant violated at line {line}: {msg}")]
    Invariant { line: usize, msg: String },

    #[error("timestamp ordering error at line {line}: {msg}")]
    Ordering { line: usize, msg: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("replay buffer not ready: {len} transitions stored, warmup is {warmup}")]
    NotReady { len: usize, warmup: usize },

    #[error("behavior density must be positive, got {0}")]
    ZeroBehaviorDensity(f64),

    #[error("non-finite gradient in parameter block `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite critic target for segment {0}")]
    NonFiniteTarget(usize),

    #[error("episode is already done")]
    EpisodeDone,

    #[error("config error in `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
