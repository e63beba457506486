use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = UifmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum UifmError {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },

    #[error("backward already ran on this graph; build a new graph")]
    BackwardTwice,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("index {index} out of range for {what} of size {size}")]
    IndexOutOfRange { what: String, index: usize, size: usize },

    #[error("{path}: line {line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("{0}: file is empty")]
    EmptyFile(String),

    #[error("missing input: {0}")]
    MissingInput(PathBuf),

    #[error("schema: {0}")]
    Schema(String),

    #[error("missing metadata for entity {0}")]
    MissingMetadata(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step} (batch {batch}): {detail}")]
    Diverged { step: usize, batch: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl UifmError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        UifmError::Shape { op, detail: detail.into() }
    }

    /// Stable machine-readable category, used for CLI exit codes.
    pub fn kind(&self) -> &'static str {
        match self {
            UifmError::MissingInput(_) => "missing_input",
            UifmError::Schema(_) | UifmError::MissingMetadata(_) => "schema_mismatch",
            UifmError::Config(_) | UifmError::InvalidArgument(_) => "invalid_config",
            UifmError::Parse { .. } | UifmError::EmptyFile(_) | UifmError::Csv(_) | UifmError::Json(_) => "bad_data",
            UifmError::Checkpoint(_) => "bad_checkpoint",
            UifmError::Diverged { .. } | UifmError::NonFinite { .. } => "numeric",
            UifmError::Io(_) => "io",
            _ => "internal",
        }
    }
}
