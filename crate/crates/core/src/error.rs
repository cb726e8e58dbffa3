use std::io;

use thiserror::Error;

/// Errors produced anywhere in the codec pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("symbol out of range: channel {channel}, value {value} not in [{min}, {max}]")]
    Range {
        channel: usize,
        value: i64,
        min: i32,
        max: i32,
    },
    #[error("corrupted data: {0}")]
    Corruption(String),
    #[error("version mismatch: {0}")]
    Versioning(String),
    #[error("truncated data: {0}")]
    Truncation(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("disjoint ranges: {0}")]
    DisjointRange(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;
