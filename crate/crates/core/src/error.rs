//! Error type shared across the library.

use thiserror::Error;

/// Library-wide error enum. Contract violations (bad shapes, invalid
/// configs, malformed files) surface as values; internal invariants that
/// can only break through a bug use `assert!` at the point of knowledge.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for an operation.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// Input values outside an operation's domain (log of non-positive, ...).
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// Graph misuse: mixing graphs, backward from a detached or non-scalar
    /// tensor, querying gradients for foreign tensors.
    #[error("graph error: {0}")]
    Graph(String),

    /// A caller-supplied argument is invalid.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An experiment or model configuration failed validation.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset files or batches are malformed.
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint bytes are malformed or inconsistent with expectations.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training produced non-finite losses or parameters.
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
