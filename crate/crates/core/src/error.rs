use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dim(String),

    #[error("label {label} at index {index} is outside [0, {classes})")]
    Label { index: usize, label: usize, classes: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("batch-norm layer `{0}` has no running statistics; run a train-mode step first")]
    UninitializedStats(String),

    #[error("architecture error: {0}")]
    Spec(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite {what} at epoch {epoch}, step {step}")]
    NonFinite { what: String, epoch: usize, step: usize },

    #[error("divergence: {0}")]
    Divergence(String),

    #[error(transparent)]
    Idx(#[from] IdxError),

    #[error(transparent)]
    Weights(#[from] WeightsError),

    #[error("I/O error on {path}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("empty {0}")]
    Empty(&'static str),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn spec(msg: impl Into<String>) -> Self {
        Error::Spec(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Spec(_) | Error::Label { .. } => 2,
            Error::Idx(_) | Error::Weights(_) | Error::Io { .. } | Error::Empty(_) => 3,
            Error::NonFinite { .. } | Error::Divergence(_) => 4,
            Error::Dim(_) | Error::Contract(_) | Error::UninitializedStats(_) => 1,
        }
    }
}

/// Failures while parsing MNIST IDX files.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("magic mismatch: expected {expected:#010x}, found {found:#010x}")]
    Magic { expected: u32, found: u32 },

    #[error("truncated file: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },

    #[error("file has {have} bytes but its header describes {expected}")]
    TrailingBytes { expected: usize, have: usize },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("label {label} at index {index} is not a digit")]
    BadLabel { index: usize, label: u8 },
}

/// Failures while reading weights files.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum WeightsError {
    #[error("not a weights file (bad magic)")]
    Magic,

    #[error("unsupported weights format version {0}")]
    Version(u32),

    #[error("CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },

    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),

    #[error("unknown dtype code {0}")]
    Dtype(u8),

    #[error("malformed weights file: {0}")]
    Malformed(String),
}
