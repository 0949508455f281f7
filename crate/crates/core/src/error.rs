use std::path::PathBuf;

use kplift_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("degenerate rotation parameters {0:?}")]
    DegenerateRotation([f64; 6]),

    #[error("structure length {0} is not divisible by 3")]
    StructureLength(usize),

    #[error("category {0:?} is already registered")]
    DuplicateCategory(String),

    #[error("unknown category {0}")]
    UnknownCategory(String),

    #[error("invalid category schema: {0}")]
    InvalidSchema(String),

    #[error("need at least 2 distinct visible keypoints, got {0}")]
    TooFewVisible(usize),

    #[error("cost matrix has {queries} queries for {targets} targets")]
    NotEnoughQueries { queries: usize, targets: usize },

    #[error("no supervised coordinates in reprojection loss")]
    NothingSupervised,

    #[error("non-finite {0} loss")]
    NonFiniteLoss(&'static str),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("{path}: malformed at byte {offset}, field `{field}`: {msg}")]
    Malformed {
        path: PathBuf,
        offset: usize,
        field: String,
        msg: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
