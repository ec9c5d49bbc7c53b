//! Request/response framing. All integers little-endian.

use std::io::{Read, Write};

use crate::codec::container::{MAGIC, VERSION};
use crate::error::{Error, Result};
use crate::layout::ResolutionClass;

pub const REQUEST_LEN: usize = 4 + 1 + 16 + 4 + 1;
/// Largest payload a client will accept.
pub const MAX_PAYLOAD: u64 = 1 << 34;
const MAX_METADATA: u32 = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WireRequest {
    pub cache_id: [u8; 16],
    pub chunk_index: u32,
    pub resolution: ResolutionClass,
}

impl WireRequest {
    pub fn to_bytes(&self) -> [u8; REQUEST_LEN] {
        let mut out = [0u8; REQUEST_LEN];
        out[..4].copy_from_slice(&MAGIC);
        out[4] = VERSION;
        out[5..21].copy_from_slice(&self.cache_id);
        out[21..25].copy_from_slice(&self.chunk_index.to_le_bytes());
        out[25] = self.resolution.code();
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() != REQUEST_LEN {
            return Err(Error::Protocol(format!("request is {} bytes, expected {REQUEST_LEN}", b.len())));
        }
        if b[..4] != MAGIC {
            return Err(Error::Protocol("bad request magic".into()));
        }
        if b[4] != VERSION {
            return Err(Error::Protocol(format!("unsupported protocol version {}", b[4])));
        }
        Ok(WireRequest {
            cache_id: b[5..21].try_into().unwrap(),
            chunk_index: u32::from_le_bytes(b[21..25].try_into().unwrap()),
            resolution: ResolutionClass::from_code(b[25]).map_err(|e| Error::Protocol(e.to_string()))?,
        })
    }

    /// Reads one request, rejecting a bad magic or version before the rest arrives.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut b = [0u8; REQUEST_LEN];
        read_full(r, &mut b[..5])?;
        if b[..4] != MAGIC {
            return Err(Error::Protocol("bad request magic".into()));
        }
        if b[4] != VERSION {
            return Err(Error::Protocol(format!("unsupported protocol version {}", b[4])));
        }
        read_full(r, &mut b[5..])?;
        Self::from_bytes(&b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Status {
    Ok = 0,
    NotFound = 1,
    ProtocolError = 2,
    InternalError = 3,
}

impl Status {
    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Status::Ok),
            1 => Ok(Status::NotFound),
            2 => Ok(Status::ProtocolError),
            3 => Ok(Status::InternalError),
            _ => Err(Error::Protocol(format!("unknown response status {c}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireResponse {
    pub status: Status,
    /// JSON document: the container header on success, `{"error": ...}` otherwise.
    pub metadata: Vec<u8>,
    pub payload: Vec<u8>,
}

impl WireResponse {
    pub fn error(status: Status, msg: &str) -> Self {
        WireResponse {
            status,
            metadata: serde_json::to_vec(&serde_json::json!({ "error": msg })).expect("string map"),
            payload: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = head_bytes(self.status, &self.metadata, self.payload.len() as u64);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let mut r = b;
        let resp = Self::read_from(&mut r)?;
        if !r.is_empty() {
            return Err(Error::Protocol(format!("{} trailing bytes after response", r.len())));
        }
        Ok(resp)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let (status, metadata, len) = read_head(r)?;
        let mut payload = Vec::new();
        r.take(len).read_to_end(&mut payload)?;
        if payload.len() as u64 != len {
            return Err(Error::Protocol(format!("payload truncated at {} of {len} bytes", payload.len())));
        }
        Ok(WireResponse { status, metadata, payload })
    }

    /// Message carried by an error response.
    pub fn error_message(&self) -> String {
        serde_json::from_slice::<serde_json::Value>(&self.metadata)
            .ok()
            .and_then(|v| v.get("error").and_then(|e| e.as_str()).map(str::to_owned))
            .unwrap_or_else(|| String::from_utf8_lossy(&self.metadata).into_owned())
    }
}

/// Status, metadata and payload length; the payload follows.
pub fn head_bytes(status: Status, metadata: &[u8], payload_len: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(1 + 4 + metadata.len() + 8);
    out.push(status as u8);
    out.extend_from_slice(&(metadata.len() as u32).to_le_bytes());
    out.extend_from_slice(metadata);
    out.extend_from_slice(&payload_len.to_le_bytes());
    out
}

pub fn write_head<W: Write>(w: &mut W, status: Status, metadata: &[u8], payload_len: u64) -> Result<()> {
    w.write_all(&head_bytes(status, metadata, payload_len))?;
    Ok(())
}

pub fn read_head<R: Read>(r: &mut R) -> Result<(Status, Vec<u8>, u64)> {
    let mut fixed = [0u8; 5];
    read_full(r, &mut fixed)?;
    let status = Status::from_code(fixed[0])?;
    let meta_len = u32::from_le_bytes(fixed[1..5].try_into().unwrap());
    if meta_len > MAX_METADATA {
        return Err(Error::Protocol(format!("metadata length {meta_len} is implausible")));
    }
    let mut metadata = vec![0u8; meta_len as usize];
    read_full(r, &mut metadata)?;
    let mut len = [0u8; 8];
    read_full(r, &mut len)?;
    let len = u64::from_le_bytes(len);
    if len > MAX_PAYLOAD {
        return Err(Error::Protocol(format!("payload length {len} is implausible")));
    }
    Ok((status, metadata, len))
}

/// `read_exact` that reports a short read as a protocol error.
pub(crate) fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Protocol("connection closed mid-message".into()),
        _ => Error::Io(e),
    })
}
