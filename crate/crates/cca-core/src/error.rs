//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape {shape:?} requires {expected} elements, got {actual}")]
    ShapeData {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("index out of range in {op}: [{lo}, {hi}) exceeds extent {extent}")]
    IndexOutOfRange {
        op: &'static str,
        lo: usize,
        hi: usize,
        extent: usize,
    },

    #[error("non-finite input to {0}")]
    NonFinite(&'static str),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("condition id {id} out of range: must be < {num_conditions}")]
    Condition { id: u32, num_conditions: usize },

    #[error("optimizer state mismatch: {0}")]
    OptimizerState(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("manifest parse error: {0}")]
    ManifestParse(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
