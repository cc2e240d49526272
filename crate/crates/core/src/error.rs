use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum LaxError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("unsupported op: {0}")]
    UnsupportedOp(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("pathway construction error: source stage {source_label} {source_shape:?} is incompatible with target stage {target_label} {target_shape:?}")]
    Pathway {
        source_label: String,
        source_shape: Vec<usize>,
        target_label: String,
        target_shape: Vec<usize>,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LaxError>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(LaxError::Dimension(msg.into()))
}
