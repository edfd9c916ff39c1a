use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-finite value in layer `{layer}`")]
    Numeric { layer: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("corrupt message: {0}")]
    Corruption(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("training diverged at epoch {epoch}, iteration {iteration}")]
    Divergence { epoch: usize, iteration: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
