use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("fully-masked attention row {row}")]
    FullyMaskedRow { row: usize },

    #[error("fully-masked attention row {row} (query role {query_role}) after mask composition")]
    FullyMaskedComposed { row: usize, query_role: String },

    #[error("backward already run on this graph; build a new graph")]
    BackwardTwice,

    #[error("backward requires a scalar sink, got shape {0:?}")]
    NonScalarSink(Vec<usize>),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("XBlock requires nonempty context")]
    EmptyContext,

    #[error("empty question")]
    EmptyQuestion,

    #[error("empty visual context")]
    EmptyVisual,

    #[error("no answer positions to score")]
    EmptyAnswer,

    #[error("sequence length {len} exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },

    #[error("invalid layout: {0}")]
    Layout(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty split `{0}`")]
    EmptySplit(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("frozen parameter `{0}` changed during training")]
    FrozenChanged(String),

    #[error("{0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
