use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A mandatory input file is missing or unreadable.
    #[error("ingestion error: {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    #[error("malformed input: {0}")]
    Malformed(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// The input is well-formed but too small or too uniform for the operation.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite input: {0}")]
    NumericInput(String),

    #[error("shape mismatch at {node}: {detail}")]
    Shape { node: String, detail: String },

    /// A non-finite value appeared during a forward pass.
    #[error("non-finite value produced by {node}")]
    Numeric { node: String },

    /// The caller violated an operation's precondition.
    #[error("contract violated: {0}")]
    Contract(String),

    #[error("corrupt container: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(node: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            node: node.into(),
            detail: detail.into(),
        }
    }
}
