//! Chunk storage server and client over a framed TCP protocol.

pub mod client;
pub mod live;
pub mod server;
pub mod store;
pub mod wire;

pub use client::{fetch_chunk, send_raw, FetchedChunk, DEFAULT_TIMEOUT};
pub use live::{live_fetch_pipeline, measured_trace, ChunkRef, LiveConfig, LiveFetch};
pub use server::{serve, RateLimit, ServerHandle, RATE_TICK};
pub use store::{container_file_name, ChunkStore, StoredChunk, CONTAINER_EXT};
pub use wire::{Status, WireRequest, WireResponse, REQUEST_LEN};

/// Listen or connect address.
pub const ADDR_ENV: &str = "KVFETCH_ADDR";
/// Server rate limit in Gbps.
pub const RATE_ENV: &str = "KVFETCH_RATE_GBPS";
pub const DEFAULT_ADDR: &str = "127.0.0.1:7070";

pub fn addr_from_env() -> String {
    std::env::var(ADDR_ENV).unwrap_or_else(|_| DEFAULT_ADDR.to_string())
}

pub fn rate_from_env() -> crate::Result<Option<f64>> {
    match std::env::var(RATE_ENV) {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse::<f64>()
            .map(Some)
            .map_err(|_| crate::Error::invalid(format!("{RATE_ENV}={v:?} is not a number"))),
        _ => Ok(None),
    }
}
