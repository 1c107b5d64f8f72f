use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PropaError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("chain does not end in an answer step")]
    NotTerminal,

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("degenerate group: all transformed values are equal")]
    DegenerateGroup,

    #[error("search tree has no terminal node with visits")]
    NoTerminal,

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("failed to load {path}: {message}")]
    Load { path: PathBuf, message: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = PropaError> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> PropaError {
    PropaError::InvalidArgument(msg.into())
}
