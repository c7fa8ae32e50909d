use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// An operation was handed tensors whose shapes do not fit together.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An operation was handed an operand it cannot work with (wrong rank,
    /// empty input list, non-scalar loss, ...).
    #[error("{op}: {msg}")]
    InvalidOperand { op: &'static str, msg: String },

    /// Input sequence is shorter than the receptive field of the conv stack.
    #[error("sequence too short for conv stack: length {len}, need at least {min_len}")]
    SequenceTooShort { len: usize, min_len: usize },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("dataset: {0}")]
    Data(String),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
