//! Skip convolutions for video: each layer convolves only the gated part of
//! its residual against the previous frame and adds it to a cached
//! pre-activation output.

pub mod bench;
pub mod engine;
pub mod error;
pub mod gates;
pub mod io;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
