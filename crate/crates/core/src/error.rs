use thiserror::Error;

/// Errors shared across the solver and model-construction APIs.
#[derive(Debug, Error)]
pub enum Error {
    /// Structural problem in a model definition (bad dimensions, missing
    /// tables, non-stochastic rows, and so on).
    #[error("invalid model: {0}")]
    InvalidModel(String),

    /// The operation requires a tree but the graph has a cycle or is
    /// disconnected.
    #[error("not a tree: {0}")]
    NotATree(String),

    /// A dense enumeration would exceed the configured entry cap.
    #[error("dense tensor too large: {entries} entries exceeds cap {cap}")]
    SizeCap { entries: usize, cap: usize },

    /// The constraints admit no solution on the model's support, e.g. an
    /// observation puts mass where the incoming message is exactly zero.
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// A conditional table carries a genuine three-way interaction and
    /// cannot be rewritten as a product of pairwise factors.
    #[error("not pairwise-decomposable: {0}")]
    NotDecomposable(String),

    /// Numerical breakdown: underflow to an all-zero message, a NaN, or a
    /// non-finite normalizer.
    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
