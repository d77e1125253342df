use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to load {path}: {source}")]
    Load {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {what}: {detail}")]
    Format { what: String, detail: String },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape { expected: Vec<i64>, actual: Vec<i64> },

    #[error("invalid condition: {0}")]
    Condition(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("lookup failed: {0}")]
    Lookup(String),

    #[error("empty batch passed to {0}")]
    EmptyBatch(&'static str),

    #[error("non-finite value in loss term `{term}`")]
    NonFinite { term: &'static str },

    #[error("checkpoint integrity error for `{name}`: {detail}")]
    Integrity { name: String, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("accuracy gate not met: best {best:.4} < required {required:.4}")]
    Gate { best: f64, required: f64 },

    #[error("training diverged at step {step} (`{term}` is not finite)")]
    Diverged { step: u64, term: &'static str },

    #[error("ncc undefined: {0} has zero variance")]
    UndefinedNcc(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Torch(#[from] tch::TchError),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn load(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Load {
            path: path.into(),
            source,
        }
    }
}
