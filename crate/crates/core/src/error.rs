use thiserror::Error;

use crate::MessageId;

pub type Result<T, E = ChoreoError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ChoreoError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("softmax over a row with no visible entries")]
    NoVisibleEntries,

    #[error("rotation delta {delta} outside table range ±{max}")]
    RotationOutOfRange { delta: i64, max: usize },

    #[error("position {position} outside context window {window}")]
    PositionOutOfWindow { position: usize, window: usize },

    #[error("cache capacity exceeded: {requested} tokens requested, capacity {capacity}")]
    CapacityExceeded { requested: usize, capacity: usize },

    #[error("unknown message id {0}")]
    UnknownMessage(MessageId),

    #[error("message of {length} tokens at offset {offset} overflows context window {window}")]
    WindowOverflow {
        offset: usize,
        length: usize,
        window: usize,
    },

    #[error("decode header must be non-empty")]
    EmptyHeader,

    #[error("parent {parent} placed at offset {first} and {second} within one parallel batch")]
    ConflictingOffsets {
        parent: MessageId,
        first: usize,
        second: usize,
    },

    #[error("parent {parent} refers to a message created in the same parallel batch")]
    CrossBatchParent { parent: MessageId },

    #[error("parent {0} listed more than once")]
    DuplicateParent(MessageId),

    #[error("{offsets} offsets given for {parents} parents")]
    OffsetsLengthMismatch { parents: usize, offsets: usize },

    #[error("token {token} of message {message} placed at position {got}, expected {expected}")]
    NonConsecutivePosition {
        message: MessageId,
        token: usize,
        expected: usize,
        got: usize,
    },

    #[error("empty parallel batch")]
    EmptyBatch,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid sampling parameters: {0}")]
    InvalidSampling(String),

    #[error("weight file: {0}")]
    WeightFormat(String),

    #[error("engines produced different outputs at {0}")]
    TraceMismatch(String),

    #[error("two consecutive generations of {0} differ")]
    Nondeterministic(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
