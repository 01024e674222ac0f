use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty reduction")]
    EmptyReduction,

    #[error("loss not finite")]
    LossNotFinite,

    #[error("shape mismatch in {op}: left is {left:?}, right is {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),

    #[error("infinite KL: q has mass at index {0} where p has none")]
    InfiniteKl(usize),

    #[error("training diverged at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("batch normalization in train mode needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),

    #[error("unknown toy dataset `{name}`; valid names: {valid}")]
    UnknownDataset { name: String, valid: String },

    #[error("csv {path}: row {row}, column {col}: {msg}")]
    CsvCell {
        path: PathBuf,
        row: usize,
        col: usize,
        msg: String,
    },

    #[error("csv {path}: {msg}")]
    Csv { path: PathBuf, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
