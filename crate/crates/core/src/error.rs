use std::io;

use thiserror::Error;

/// Errors raised anywhere in the reconstruction pipeline.
#[derive(Error, Debug)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    /// A file did not match the expected container layout.
    #[error("format error: {0}")]
    Format(String),

    /// Tensor or grid shapes are inconsistent with each other.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An argument is outside its valid domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A NaN or infinity reached a numeric kernel.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! bail {
    ($variant:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$variant(format!($($arg)*)))
    };
}
pub(crate) use bail;
