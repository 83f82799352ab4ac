use thiserror::Error;

/// Errors produced by the tensor algebra, autodiff engine and solver.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an API contract (bad mode index, negative
    /// threshold, mismatched shapes, ...).
    #[error("invalid usage: {0}")]
    Usage(String),

    /// Shapes of two operands are incompatible.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A computation produced or received a non-finite value.
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn non_finite(msg: impl Into<String>) -> Self {
        Error::NonFinite(msg.into())
    }
}
