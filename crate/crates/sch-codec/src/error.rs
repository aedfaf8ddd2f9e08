//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by the codec, the model stack, and the analysis tools.
#[derive(Debug, Error)]
pub enum SchError {
    /// A tensor had an incompatible shape (odd spatial dims, bad channel
    /// count, window divisibility, ...).
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A configuration value violated an invariant.
    #[error("config error: {0}")]
    Config(String),

    /// Slice operations were invoked out of autoregressive order.
    #[error("sequencing error: {0}")]
    Sequencing(String),

    /// The bitstream is malformed (bad magic, bad lengths, garbage data).
    #[error("malformed bitstream: {0}")]
    Bitstream(String),

    /// The bitstream ended before all coded segments were read.
    #[error("truncated bitstream: {0}")]
    Truncated(String),

    /// The bitstream was produced by a different model/config.
    #[error("config hash mismatch: stream has {stream:#010x}, model has {model:#010x}")]
    HashMismatch { stream: u32, model: u32 },

    /// A metric could not be computed (too few RD points, empty overlap, ...).
    #[error("metric error: {0}")]
    Metric(String),

    /// Checkpoint container problems (bad magic/version, shape mismatch).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Unsupported input image (wrong depth, zero size).
    #[error("input error: {0}")]
    Input(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, SchError>;

impl SchError {
    /// Stable process exit code for the CLI; each failure class gets its own.
    pub fn exit_code(&self) -> i32 {
        match self {
            SchError::Io(_) | SchError::Image(_) | SchError::Input(_) => 2,
            SchError::Config(_) => 3,
            SchError::HashMismatch { .. } => 4,
            SchError::Bitstream(_) | SchError::Truncated(_) => 5,
            SchError::Metric(_) => 6,
            SchError::Checkpoint(_) => 7,
            SchError::Dimension(_) | SchError::Sequencing(_) => 8,
        }
    }

    /// Short machine-readable kind tag used in CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            SchError::Dimension(_) => "dimension",
            SchError::Config(_) => "config",
            SchError::Sequencing(_) => "sequencing",
            SchError::Bitstream(_) => "bitstream",
            SchError::Truncated(_) => "truncated",
            SchError::HashMismatch { .. } => "hash-mismatch",
            SchError::Metric(_) => "metric",
            SchError::Checkpoint(_) => "checkpoint",
            SchError::Input(_) => "input",
            SchError::Io(_) => "io",
            SchError::Image(_) => "image",
        }
    }
}
