use thiserror::Error;

use crate::graph::ValidationReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("unknown node id {0}")]
    UnknownNode(u32),

    #[error("variable {var} out of range (circuit has {num_vars} variables)")]
    VarOutOfRange { var: u32, num_vars: u32 },

    #[error("sum node has {children} children but {params} parameters")]
    ArityMismatch { children: usize, params: usize },

    #[error("node {0} needs at least one child")]
    NoChildren(u32),

    #[error("cycle detected through node {0}")]
    Cycle(u32),

    #[error("circuit failed validation: {0}")]
    Invalid(ValidationReport),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("backward pass requested before a forward pass on this batch")]
    BackwardBeforeForward,

    #[error("compiled cache: {0}")]
    Cache(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { line, msg: msg.into() }
    }
}
