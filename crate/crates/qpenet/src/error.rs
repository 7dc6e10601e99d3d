use thiserror::Error;

/// Errors surfaced by the library. Shape bookkeeping inside the compute
/// graph panics instead; these are the contract violations a caller can
/// actually cause.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("mask sums to zero and the epsilon guard is disabled")]
    EmptyMask,

    #[error("support foreground is empty")]
    EmptySupport,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("no class in the requested split has enough samples for a {k}-shot episode")]
    InsufficientSamples { k: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint version mismatch: file has {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("non-finite loss at step {step}: {value}")]
    NonFiniteLoss { step: u64, value: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
