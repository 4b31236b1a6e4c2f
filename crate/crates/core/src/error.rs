use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checksum mismatch for tensor `{name}`: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch {
        name: String,
        stored: u32,
        computed: u32,
    },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("frame of {got} bytes exceeds limit of {limit} bytes")]
    FrameTooLarge { got: u64, limit: u64 },

    #[error("unexpected end of input while decoding {0}")]
    Truncated(&'static str),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
