use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("insufficient data: need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("layer {layer}: {reason}")]
    Construction { layer: usize, reason: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("unregistered label `{0}`")]
    UnknownLabel(String),
}

pub type Result<T> = core::result::Result<T, Error>;
