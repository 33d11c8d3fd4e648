use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    /// Malformed volume file: bad magic, version, dtype, or payload length.
    #[error("format: {0}")]
    Format(String),
    /// Dimension or shape mismatch between operands.
    #[error("shape: {0}")]
    Shape(String),
    #[error("config: {0}")]
    Config(String),
    /// Invalid data content (labels out of range, non-finite values, ...).
    #[error("data: {0}")]
    Data(String),
    /// Computation-graph misuse (non-scalar loss, repeated backward, ...).
    #[error("graph: {0}")]
    Graph(String),
    /// Training produced a non-finite loss and was aborted.
    #[error("training diverged: {0}")]
    Diverged(String),
}

pub type Result<T> = std::result::Result<T, Error>;
