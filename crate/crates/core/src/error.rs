use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("{kind} id {id} out of vocabulary (size {size})")]
    OutOfVocabulary {
        kind: &'static str,
        id: usize,
        size: usize,
    },

    #[error("matrix is not symmetric positive definite")]
    NotPositiveDefinite,

    #[error("no cells match filter {0}")]
    NoMatchingCells(String),

    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
