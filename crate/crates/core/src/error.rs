use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("missing config key `{0}`")]
    MissingKey(String),

    #[error("invalid value for config key `{key}`: {reason}")]
    InvalidValue { key: String, reason: String },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("data error at {path}: {reason}")]
    Data { path: PathBuf, reason: String },

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("checkpoint not found: {0}")]
    MissingCheckpoint(PathBuf),

    #[error("refusing to read source data during adaptation: {0}")]
    SourceAccess(PathBuf),

    #[error("every centroid is absent; no class can be assigned")]
    NoCentroids,

    #[error("labeled pool is empty (split fraction a = {fraction}); inspect the entropy distribution of the input predictions")]
    EmptyLabeledPool { fraction: f64 },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
