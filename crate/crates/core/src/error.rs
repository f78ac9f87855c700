use thiserror::Error;

use crate::numerics::BufferId;
use crate::stream::OpId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A value that cannot be quantized (NaN or infinite) was found at `index`.
    #[error("quantization domain error: non-finite value {value} at element {index}")]
    QuantizationDomain { index: usize, value: f32 },

    #[error("read of uninitialized buffer {0}")]
    UninitializedRead(BufferId),

    #[error("invalid program: {0}")]
    InvalidProgram(String),

    /// No op can make progress. `waiting` lists the blocked stream heads and
    /// `cycle` the wait cycle when one exists (empty if a wait can never be satisfied).
    #[error("deadlock: ops {waiting:?} blocked (cycle {cycle:?})")]
    Deadlock { waiting: Vec<OpId>, cycle: Vec<OpId> },

    #[error("lifecycle error: {0}")]
    Lifecycle(String),

    #[error("config error for key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(key: &str, message: impl Into<String>) -> Self {
        Error::Config { key: key.to_string(), message: message.into() }
    }
}
