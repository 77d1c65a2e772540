//! Crate-wide error type. Variants double as the error categories reported
//! by the CLI.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("zero variance error: {0}")]
    ZeroVariance(String),
    #[error("normalization error: {0}")]
    ZeroNorm(String),
    #[error("structure error: {0}")]
    Structure(String),
    #[error("layout error: {0}")]
    Layout(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("frozen-parameter violation: {0}")]
    Frozen(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
