//! `KVFC` chunk container: one three-layer token slab encoded at several resolutions.

use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{LayoutConfig, ResolutionClass};

pub const MAGIC: [u8; 4] = *b"KVFC";
pub const VERSION: u8 = 1;
/// Default chunk capacity in tokens.
pub const CHUNK_TOKENS: usize = 10_000;
const ENTRY_LEN: usize = 17;

/// Self-describing metadata carried in the container's JSON blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkMeta {
    pub layout: LayoutConfig,
    pub group_size: usize,
    /// Quantization scales of the three layers, layer-major.
    pub scales: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolutionEntry {
    pub class: ResolutionClass,
    /// Absolute byte offset of the bitstream from the start of the container.
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    #[serde(with = "hex16")]
    pub cache_id: [u8; 16],
    pub chunk_index: u32,
    pub token_start: u32,
    pub token_count: u32,
    pub layer_triplet_index: u8,
    pub meta: ChunkMeta,
    pub entries: Vec<ResolutionEntry>,
}

mod hex16 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(id: &[u8; 16], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&super::cache_id_hex(id))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 16], D::Error> {
        let s = String::deserialize(d)?;
        super::parse_cache_id(&s).map_err(serde::de::Error::custom)
    }
}

pub fn cache_id_hex(id: &[u8; 16]) -> String {
    id.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn parse_cache_id(s: &str) -> Result<[u8; 16]> {
    if s.len() != 32 || !s.is_ascii() {
        return Err(Error::invalid(format!("cache id must be 32 hex digits, got {s:?}")));
    }
    let mut out = [0u8; 16];
    for (i, b) in out.iter_mut().enumerate() {
        *b = u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
            .map_err(|_| Error::invalid(format!("cache id {s:?} is not hex")))?;
    }
    Ok(out)
}

impl ContainerHeader {
    pub fn entry(&self, class: ResolutionClass) -> Option<&ResolutionEntry> {
        self.entries.iter().find(|e| e.class == class)
    }

    pub fn resolutions(&self) -> Vec<ResolutionClass> {
        self.entries.iter().map(|e| e.class).collect()
    }

    fn blob(&self) -> Result<Vec<u8>> {
        let blob = serde_json::to_vec(&self.meta)?;
        if blob.len() > u16::MAX as usize {
            return Err(Error::invalid(format!("metadata blob of {} bytes exceeds u16 length", blob.len())));
        }
        Ok(blob)
    }

    /// Encoded header length in bytes.
    pub fn encoded_len(&self) -> Result<usize> {
        Ok(4 + 1 + 16 + 4 + 4 + 4 + 1 + 2 + self.blob()?.len() + 1 + ENTRY_LEN * self.entries.len())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.entries.len() > u8::MAX as usize {
            return Err(Error::invalid("too many resolution entries"));
        }
        let blob = self.blob()?;
        let mut out = Vec::with_capacity(self.encoded_len()?);
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.cache_id);
        out.extend_from_slice(&self.chunk_index.to_le_bytes());
        out.extend_from_slice(&self.token_start.to_le_bytes());
        out.extend_from_slice(&self.token_count.to_le_bytes());
        out.push(self.layer_triplet_index);
        out.extend_from_slice(&(blob.len() as u16).to_le_bytes());
        out.extend_from_slice(&blob);
        out.push(self.entries.len() as u8);
        for e in &self.entries {
            out.push(e.class.code());
            out.extend_from_slice(&e.offset.to_le_bytes());
            out.extend_from_slice(&e.length.to_le_bytes());
        }
        Ok(out)
    }

    /// Reads a header from the start of a stream, leaving the reader after it.
    pub fn read_from<R: Read>(r: &mut R) -> Result<ContainerHeader> {
        let mut fixed = [0u8; 36];
        read_exact(r, &mut fixed[..5])?;
        if fixed[..4] != MAGIC {
            return Err(Error::Protocol("bad container magic".into()));
        }
        if fixed[4] != VERSION {
            return Err(Error::Protocol(format!("unsupported container version {}", fixed[4])));
        }
        read_exact(r, &mut fixed[5..])?;
        let u32_at = |at: usize| u32::from_le_bytes(fixed[at..at + 4].try_into().unwrap());
        let cache_id: [u8; 16] = fixed[5..21].try_into().unwrap();
        let (chunk_index, token_start, token_count) = (u32_at(21), u32_at(25), u32_at(29));
        let layer_triplet_index = fixed[33];
        let blob_len = u16::from_le_bytes([fixed[34], fixed[35]]) as usize;
        let mut blob = vec![0u8; blob_len];
        read_exact(r, &mut blob)?;
        let meta: ChunkMeta = serde_json::from_slice(&blob)
            .map_err(|e| Error::Protocol(format!("container metadata: {e}")))?;
        let mut count = [0u8; 1];
        read_exact(r, &mut count)?;
        let mut entries = Vec::with_capacity(count[0] as usize);
        for _ in 0..count[0] {
            let mut e = [0u8; ENTRY_LEN];
            read_exact(r, &mut e)?;
            let class = ResolutionClass::from_code(e[0]).map_err(|err| Error::Protocol(err.to_string()))?;
            if entries.iter().any(|x: &ResolutionEntry| x.class == class) {
                return Err(Error::Protocol(format!("duplicate resolution entry {class}")));
            }
            entries.push(ResolutionEntry {
                class,
                offset: u64::from_le_bytes(e[1..9].try_into().unwrap()),
                length: u64::from_le_bytes(e[9..17].try_into().unwrap()),
            });
        }
        Ok(ContainerHeader {
            cache_id,
            chunk_index,
            token_start,
            token_count,
            layer_triplet_index,
            meta,
            entries,
        })
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Protocol("container truncated".into()),
        _ => Error::Io(e),
    })
}

/// A parsed container together with its encoded bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkContainer {
    header: ContainerHeader,
    bytes: Vec<u8>,
}

impl ChunkContainer {
    /// Assembles a container; payload offsets are assigned in the given order.
    pub fn build(mut header: ContainerHeader, payloads: Vec<(ResolutionClass, Vec<u8>)>) -> Result<Self> {
        if payloads.is_empty() {
            return Err(Error::invalid("a container needs at least one resolution"));
        }
        header.entries = payloads
            .iter()
            .map(|(class, p)| ResolutionEntry {
                class: *class,
                offset: 0,
                length: p.len() as u64,
            })
            .collect();
        let mut at = header.encoded_len()? as u64;
        for e in header.entries.iter_mut() {
            e.offset = at;
            at += e.length;
        }
        let mut bytes = header.to_bytes()?;
        for (_, p) in &payloads {
            bytes.extend_from_slice(p);
        }
        ChunkContainer::from_bytes(bytes)
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        let mut cursor = bytes.as_slice();
        let header = ContainerHeader::read_from(&mut cursor)?;
        let header_len = (bytes.len() - cursor.len()) as u64;
        let mut spans: Vec<(u64, u64)> = Vec::new();
        for e in &header.entries {
            let end = e.offset.checked_add(e.length);
            if e.offset < header_len || end.is_none_or(|end| end > bytes.len() as u64) {
                return Err(Error::Protocol(format!("entry {} points outside the container", e.class)));
            }
            let end = end.unwrap();
            if spans.iter().any(|&(s, t)| e.offset < t && s < end) {
                return Err(Error::Protocol(format!("entry {} overlaps another entry", e.class)));
            }
            spans.push((e.offset, end));
        }
        Ok(ChunkContainer { header, bytes })
    }

    pub fn header(&self) -> &ContainerHeader {
        &self.header
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    pub fn payload(&self, class: ResolutionClass) -> Result<&[u8]> {
        let e = self
            .header
            .entry(class)
            .ok_or_else(|| Error::NotFound(format!("resolution {class} not in container")))?;
        Ok(&self.bytes[e.offset as usize..(e.offset + e.length) as usize])
    }
}
