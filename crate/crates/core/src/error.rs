use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid construction parameters (dimensions, orders, mixing weights).
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller violated an operation's precondition (shape, range, finiteness).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Problem too large for the exact transport solver.
    #[error("transport problem has {cells} cells, above the exact-solver cap of {cap}; use sinkhorn")]
    Capacity { cells: usize, cap: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Malformed on-disk data (dataset files, model containers).
    #[error("format error: {0}")]
    Format(String),

    /// Loss or parameters went non-finite during training.
    #[error("numerical failure at step {step}: {detail}")]
    Numerical { step: u64, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
