use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("ATN tail parameter must exceed 2, got {0}")]
    InvalidNu(f64),

    #[error("invalid probability {name}={value}")]
    InvalidProbability { name: &'static str, value: f64 },

    #[error("channel {0} requires symbols in {{-1,+1}}")]
    NotBinaryInput(&'static str),

    #[error("degenerate block: pooled standard deviation {0:e} is too small to normalize")]
    DegenerateBlock(f64),

    #[error("KSG estimator needs at least {min} samples with k < n (got n={n}, k={k})")]
    TooFewSamples { n: usize, k: usize, min: usize },

    #[error("not a checkpoint file (bad magic)")]
    BadMagic,

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint checksum mismatch (file truncated or corrupted)")]
    ChecksumMismatch,

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
