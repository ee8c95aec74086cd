//! Shared error type for the simulator.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("layer index {index} out of range for {layers} layers")]
    LayerOutOfRange { index: usize, layers: usize },

    #[error("aggregator admissibility violated: {0}")]
    Admissibility(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data format error: {0}")]
    DataFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
