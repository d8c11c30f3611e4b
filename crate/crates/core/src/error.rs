use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("toolchain missing: {0}")]
    ToolchainMissing(String),

    #[error("compilation failed for {function}: {message}")]
    CompileFailure { function: String, message: String },

    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: usize },

    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGradient(String),

    #[error("non-finite update in tensor {0}")]
    NonFiniteUpdate(String),

    #[error("loss diverged at step {step}")]
    Diverged { step: u64 },

    #[error("shape mismatch for tensor {name}: expected {expected:?}, found {found:?}")]
    ShapeMismatch { name: String, expected: (usize, usize), found: (usize, usize) },

    #[error("missing tensor {0}")]
    MissingTensor(String),

    #[error("malformed container: {0}")]
    Container(String),

    #[error("corrupt record at {path}:{line}: {message}")]
    CorruptRecord { path: PathBuf, line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
