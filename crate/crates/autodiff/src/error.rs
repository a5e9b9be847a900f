use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("zero extent in shape {0:?}")]
    EmptyDimension(Vec<usize>),

    #[error("{op}: reduction over an empty axis")]
    EmptyAxis { op: &'static str },

    #[error("index {index} out of range for a table of {rows} rows (position {position})")]
    IndexOutOfRange {
        index: usize,
        rows: usize,
        position: usize,
    },

    #[error("softmax row {row} has every position masked")]
    FullyMasked { row: usize },

    #[error("cross-entropy has no target positions")]
    NoTargets,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this tape")]
    BackwardTwice,

    #[error("{op} produced a non-finite value from finite inputs")]
    NonFinite { op: &'static str },

    #[error("tape has no parameter store bound")]
    NoParams,

    #[error("duplicate parameter name {0:?}")]
    DuplicateParam(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
