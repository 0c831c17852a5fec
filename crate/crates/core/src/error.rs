//! Error type shared by every module of the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FedPruneError>;

#[derive(Debug, Error)]
pub enum FedPruneError {
    #[error("variable `{0}` is already registered")]
    DuplicateVar(String),

    #[error("unknown variable `{0}`")]
    UnknownVar(String),

    #[error("variable `{name}` has invalid shape {shape:?}")]
    InvalidShape { name: String, shape: Vec<usize> },

    #[error("group {group}: {reason}")]
    InvalidGroup { group: u32, reason: String },

    #[error("variable `{0}` is not prunable")]
    NotPrunable(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("mask mismatch: {0}")]
    MaskMismatch(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("momentum state is not initialized")]
    MomentumUninitialized,

    #[error("non-finite value in variable `{0}`")]
    NonFinite(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl FedPruneError {
    /// True for errors caused by the user's configuration rather than by the run itself.
    pub fn is_config_error(&self) -> bool {
        matches!(self, FedPruneError::Config(_))
    }
}
