//! Remote KV-cache reuse through video-style coding.
//!
//! KV tensors are quantized, laid out as frames and compressed with a lossless
//! predictive codec. A fetch simulator picks per-chunk resolutions against a decode
//! pool model, a scheduler simulator keeps fetching requests off the critical path,
//! and a small TCP store serves encoded chunks.

pub mod codec;
pub mod error;
pub mod fetchsim;
pub mod kv;
pub mod layout;
pub mod netstore;
pub mod paged;
pub mod scheduler;

pub use error::{Error, Result};
