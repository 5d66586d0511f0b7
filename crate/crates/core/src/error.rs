use thiserror::Error;

/// Errors shared by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("unknown name `{name}`; valid names: {}", valid.join(", "))]
    UnknownName {
        name: String,
        valid: Vec<&'static str>,
    },

    #[error("non-finite value encountered in {stage}")]
    NonFinite { stage: String },

    #[error("non-finite loss on batch {batch}")]
    NonFiniteLoss { batch: usize },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(
        "Riccati iteration did not converge after {iterations} iterations \
         (last residual {residual:.3e})"
    )]
    RiccatiNotConverged { iterations: usize, residual: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
