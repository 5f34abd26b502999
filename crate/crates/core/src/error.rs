use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{layer}: expected {expected} input channels, got {actual}")]
    ChannelMismatch {
        layer: String,
        expected: usize,
        actual: usize,
    },

    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize, usize),
        right: (usize, usize, usize),
    },

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("invalid gate configuration: {0}")]
    GateConfig(String),

    #[error("unknown gate variant `{0}`")]
    UnknownGate(String),

    #[error("stream state not initialized; process a reference frame first")]
    Uninitialized,

    #[error(
        "frame geometry changed from {expected:?} to {actual:?}; \
         reset the stream with a new reference frame"
    )]
    GeometryDrift {
        expected: (usize, usize, usize),
        actual: (usize, usize, usize),
    },

    #[error("empty frame sequence")]
    EmptySequence,

    #[error("gate loss needs at least 2 frames per clip (got {0})")]
    ClipTooShort(usize),

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
