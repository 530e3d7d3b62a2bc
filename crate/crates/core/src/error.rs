use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid config: {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("spectral norm: weight matrix has zero spectral estimate")]
    ZeroSpectrum,
    #[error("stage-2 step requires the stage-1 discriminator snapshot")]
    MissingSnapshot,
    #[error("checkpoint has no generator")]
    MissingGenerator,
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("degenerate prototype for class {0}")]
    DegeneratePrototype(usize),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field,
            reason: reason.into(),
        }
    }
}
