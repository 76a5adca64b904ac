use std::path::PathBuf;

use thiserror::Error;

use crate::model::ShapeError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch ({lhs_rows}x{lhs_cols} vs {rhs_rows}x{rhs_cols})")]
    DimMismatch {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },

    #[error("{op}: range {start}..{end} out of bounds for length {len}")]
    OutOfBounds {
        op: &'static str,
        start: usize,
        end: usize,
        len: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("token {token} at position {position} is out of range for vocabulary of {vocab}")]
    TokenOutOfRange {
        token: usize,
        position: usize,
        vocab: usize,
    },

    #[error("sequence length {len} outside 1..={max}")]
    BadSequenceLength { len: usize, max: usize },

    #[error("parameters do not match config: {}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
    Validation(Vec<ShapeError>),

    #[error("schedule step {index} failed: {source}")]
    Schedule {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("tape does not belong to these parameters: {0}")]
    TapeMismatch(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("plan: {0}")]
    Plan(String),

    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
