//! Rate-distortion KV-cache compression: attention-derived unit weights,
//! per-unit bit-width allocation, mixed-bit packing and decode.

pub mod allocator;
pub mod cache;
pub mod error;
pub mod harness;
pub mod pipeline;
pub mod quantizer;
pub mod trizone;
pub mod weights;

pub use error::{RdkvError, Result};
