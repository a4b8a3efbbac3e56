use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("node {0} is not on this tape")]
    UnknownNode(usize),
    #[error("attention row {row} has no allowed positions")]
    EmptyAttention { row: usize },
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(AutodiffError::Contract(msg.into()))
}
