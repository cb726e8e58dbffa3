//! Stereo multi-scale feature coding for machine vision.

// numeric kernels index several parallel buffers with one counter
#![allow(clippy::needless_range_loop)]

pub mod entropy;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod smfc;
pub mod task;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
