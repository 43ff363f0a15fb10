use alloc::string::String;

/// Errors raised by the core pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("point {index} at ({x}, {y}) lies outside the {width}x{height} image")]
    PointOutOfBounds { index: usize, x: f64, y: f64, width: usize, height: usize },

    #[error("invalid configuration: {field}: {reason}")]
    Config { field: &'static str, reason: String },

    #[error("padding contract violated: {height}x{width} is not divisible by {divisor}")]
    Padding { height: usize, width: usize, divisor: usize },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss is not finite")]
    Diverged { epoch: usize, step: usize },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Error {
    Error::Config { field, reason: reason.into() }
}
