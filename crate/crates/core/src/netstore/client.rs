//! Fetching one resolution entry from a chunk server.

use std::io::{BufReader, Read, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use super::wire::{read_head, Status, WireRequest, WireResponse};
use crate::codec::ContainerHeader;
use crate::error::{Error, Result};
use crate::layout::ResolutionClass;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq)]
pub struct FetchedChunk {
    pub header: ContainerHeader,
    pub resolution: ResolutionClass,
    pub payload: Vec<u8>,
    /// Request sent to last payload byte received.
    pub tau_trans_s: f64,
}

fn io_err(e: std::io::Error) -> Error {
    match e.kind() {
        std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut => Error::Timeout(e.to_string()),
        std::io::ErrorKind::UnexpectedEof => Error::Protocol("connection closed mid-message".into()),
        _ => Error::Io(e),
    }
}

fn lift(e: Error) -> Error {
    match e {
        Error::Io(io) => io_err(io),
        other => other,
    }
}

fn connect(addr: impl ToSocketAddrs, timeout: Duration) -> Result<TcpStream> {
    let addrs: Vec<SocketAddr> = addr.to_socket_addrs()?.collect();
    let mut last = None;
    for a in addrs {
        match TcpStream::connect_timeout(&a, timeout) {
            Ok(s) => {
                s.set_read_timeout(Some(timeout))?;
                s.set_write_timeout(Some(timeout))?;
                s.set_nodelay(true)?;
                return Ok(s);
            }
            Err(e) => last = Some(e),
        }
    }
    Err(last.map_or_else(|| Error::invalid("address resolved to nothing"), io_err))
}

/// Sends raw request bytes and reads whatever response comes back.
pub fn send_raw(addr: impl ToSocketAddrs, request: &[u8], timeout: Duration) -> Result<WireResponse> {
    let mut s = connect(addr, timeout)?;
    s.write_all(request).map_err(io_err)?;
    WireResponse::read_from(&mut BufReader::new(s)).map_err(lift)
}

pub fn fetch_chunk(
    addr: impl ToSocketAddrs,
    cache_id: [u8; 16],
    chunk_index: u32,
    resolution: ResolutionClass,
    timeout: Duration,
) -> Result<FetchedChunk> {
    let mut s = connect(addr, timeout)?;
    let start = Instant::now();
    let req = WireRequest { cache_id, chunk_index, resolution };
    s.write_all(&req.to_bytes()).map_err(io_err)?;
    let mut r = BufReader::with_capacity(1 << 20, s);
    let (status, metadata, len) = read_head(&mut r).map_err(lift)?;
    let mut payload = Vec::with_capacity(len.min(1 << 30) as usize);
    (&mut r).take(len).read_to_end(&mut payload).map_err(io_err)?;
    let tau = start.elapsed().as_secs_f64();
    if payload.len() as u64 != len {
        return Err(Error::Protocol(format!("payload truncated at {} of {len} bytes", payload.len())));
    }
    let resp = WireResponse { status, metadata, payload };
    match status {
        Status::Ok => {}
        Status::NotFound => return Err(Error::NotFound(resp.error_message())),
        Status::ProtocolError => return Err(Error::Protocol(resp.error_message())),
        Status::InternalError => return Err(Error::InvalidState(format!("server: {}", resp.error_message()))),
    }
    let header: ContainerHeader = serde_json::from_slice(&resp.metadata)
        .map_err(|e| Error::Protocol(format!("response metadata: {e}")))?;
    let entry = header
        .entry(resolution)
        .ok_or_else(|| Error::Protocol(format!("metadata lists no {resolution} entry")))?;
    if entry.length != len || header.cache_id != cache_id || header.chunk_index != chunk_index {
        return Err(Error::Protocol("response does not match the requested entry".into()));
    }
    Ok(FetchedChunk {
        header,
        resolution,
        payload: resp.payload,
        tau_trans_s: tau,
    })
}
