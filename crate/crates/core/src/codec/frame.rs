//! Lossless predictive frame coder.
//!
//! Each plane of each frame is one range-coded stream with fresh contexts. Blocks are
//! visited in raster order; inter-eligible frames spend one adaptive mode bit per block.

use serde::{Deserialize, Serialize};

use super::range::{BitModel, ByteModel, RangeDecoder, RangeEncoder};
use crate::error::{Error, Result};
use crate::layout::Frame;

pub const DEFAULT_BLOCK_SIZE: usize = 16;
pub const MAX_REFERENCE_DEPTH: usize = 3;
const CORNER_PREDICTION: u8 = 128;
const HEADER_LEN: usize = 12;
const FRAME_ENTRY_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub block_size: usize,
    pub reference_depth: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            block_size: DEFAULT_BLOCK_SIZE,
            reference_depth: 1,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(Error::Config("block_size must be positive".into()));
        }
        if !(1..=MAX_REFERENCE_DEPTH).contains(&self.reference_depth) {
            return Err(Error::Config(format!(
                "reference_depth must be in 1..={MAX_REFERENCE_DEPTH}, got {}",
                self.reference_depth
            )));
        }
        Ok(())
    }
}

/// Encoded frame sequence.
///
/// Layout: `u32 width, u32 height, u32 frame_count`, then per frame `u32 byte_len,
/// u32 inter_blocks`, then the frame bodies. A body is three `u32 len + stream` planes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitstream {
    bytes: Vec<u8>,
    width: usize,
    height: usize,
    frame_lens: Vec<usize>,
    inter_blocks: Vec<u32>,
}

fn read_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
}

impl Bitstream {
    /// Parses the header. Frame bodies are only checked while decoding, so a truncated
    /// stream still yields the frames that precede the cut.
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        let short = || Error::Protocol("bitstream header truncated".into());
        let width = read_u32(&bytes, 0).ok_or_else(short)? as usize;
        let height = read_u32(&bytes, 4).ok_or_else(short)? as usize;
        let count = read_u32(&bytes, 8).ok_or_else(short)? as usize;
        if width == 0 || height == 0 {
            return Err(Error::Protocol("bitstream declares an empty frame".into()));
        }
        let table_end = count
            .checked_mul(FRAME_ENTRY_LEN)
            .and_then(|n| n.checked_add(HEADER_LEN))
            .filter(|&n| n <= bytes.len())
            .ok_or_else(short)?;
        let mut frame_lens = Vec::with_capacity(count);
        let mut inter_blocks = Vec::with_capacity(count);
        for i in 0..count {
            let at = HEADER_LEN + i * FRAME_ENTRY_LEN;
            frame_lens.push(read_u32(&bytes, at).unwrap() as usize);
            inter_blocks.push(read_u32(&bytes, at + 4).unwrap());
        }
        debug_assert!(table_end <= bytes.len());
        Ok(Bitstream {
            bytes,
            width,
            height,
            frame_lens,
            inter_blocks,
        })
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn frame_count(&self) -> usize {
        self.frame_lens.len()
    }

    fn body_start(&self) -> usize {
        HEADER_LEN + self.frame_count() * FRAME_ENTRY_LEN
    }

    /// Start offset of each frame body within `bytes`.
    pub fn frame_offsets(&self) -> Vec<usize> {
        let mut at = self.body_start();
        self.frame_lens
            .iter()
            .map(|len| {
                let o = at;
                at += len;
                o
            })
            .collect()
    }

    pub fn frame_len(&self, frame: usize) -> usize {
        self.frame_lens[frame]
    }

    /// Fraction of inter-coded blocks (over all three planes) in one frame.
    pub fn inter_fraction(&self, frame: usize, cfg: &CodecConfig) -> f64 {
        let blocks = blocks_per_plane(self.width, self.height, cfg.block_size) * 3;
        self.inter_blocks[frame] as f64 / blocks as f64
    }

    pub fn inter_blocks(&self, frame: usize) -> u32 {
        self.inter_blocks[frame]
    }
}

fn blocks_per_plane(width: usize, height: usize, block: usize) -> usize {
    width.div_ceil(block) * height.div_ceil(block)
}

#[inline]
fn zigzag(residual: u8) -> u8 {
    let e = residual as i8;
    ((e << 1) ^ (e >> 7)) as u8
}

#[inline]
fn unzigzag(z: u8) -> u8 {
    (z >> 1) ^ (z & 1).wrapping_neg()
}

#[inline]
fn intra_pred(plane: &[u8], width: usize, x: usize, y: usize) -> u8 {
    if x > 0 {
        plane[y * width + x - 1]
    } else if y > 0 {
        plane[(y - 1) * width]
    } else {
        CORNER_PREDICTION
    }
}

struct BlockIter {
    width: usize,
    height: usize,
    block: usize,
}

impl BlockIter {
    /// `(x0, y0, x1, y1)` of each block in raster order.
    fn blocks(&self) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        let b = self.block;
        (0..self.height.div_ceil(b)).flat_map(move |by| {
            (0..self.width.div_ceil(b)).map(move |bx| {
                let (x0, y0) = (bx * b, by * b);
                (x0, y0, (x0 + b).min(self.width), (y0 + b).min(self.height))
            })
        })
    }
}

/// Returns the coded plane and the number of inter blocks chosen.
fn encode_plane(cur: &[u8], prev: Option<&[u8]>, width: usize, height: usize, block: usize) -> (Vec<u8>, u32, usize) {
    let mut enc = RangeEncoder::new();
    let mut model = ByteModel::new();
    let mut mode_model = BitModel::default();
    let mut inter_blocks = 0;
    let it = BlockIter { width, height, block };
    for (x0, y0, x1, y1) in it.blocks() {
        let inter = match prev {
            None => false,
            Some(prev) => {
                let (mut sad_intra, mut sad_inter) = (0u32, 0u32);
                for y in y0..y1 {
                    for x in x0..x1 {
                        let v = cur[y * width + x] as i32;
                        sad_intra += (v - intra_pred(cur, width, x, y) as i32).unsigned_abs();
                        sad_inter += (v - prev[y * width + x] as i32).unsigned_abs();
                    }
                }
                let inter = sad_inter <= sad_intra;
                enc.encode_bit(&mut mode_model, inter);
                inter
            }
        };
        inter_blocks += inter as u32;
        for y in y0..y1 {
            for x in x0..x1 {
                let pred = match (inter, prev) {
                    (true, Some(prev)) => prev[y * width + x],
                    _ => intra_pred(cur, width, x, y),
                };
                enc.encode_byte(&mut model, zigzag(cur[y * width + x].wrapping_sub(pred)));
            }
        }
    }
    let accounted = enc.accounted_len() + 5;
    (enc.finish(), inter_blocks, accounted)
}

fn decode_plane(
    input: &[u8],
    out: &mut [u8],
    prev: Option<&[u8]>,
    width: usize,
    height: usize,
    block: usize,
) -> Result<u32> {
    let mut dec = RangeDecoder::new(input)?;
    let mut model = ByteModel::new();
    let mut mode_model = BitModel::default();
    let mut inter_blocks = 0;
    let it = BlockIter { width, height, block };
    for (x0, y0, x1, y1) in it.blocks() {
        let inter = prev.is_some() && dec.decode_bit(&mut mode_model);
        inter_blocks += inter as u32;
        for y in y0..y1 {
            for x in x0..x1 {
                let pred = match (inter, prev) {
                    (true, Some(prev)) => prev[y * width + x],
                    _ => intra_pred(out, width, x, y),
                };
                out[y * width + x] = pred.wrapping_add(unzigzag(dec.decode_byte(&mut model)));
            }
        }
    }
    dec.check()?;
    if dec.consumed() != input.len() {
        return Err(Error::Protocol("plane stream has trailing bytes".into()));
    }
    Ok(inter_blocks)
}

/// Incremental encoder: push frames one at a time, then `finish`.
pub struct FrameEncoder {
    cfg: CodecConfig,
    width: usize,
    height: usize,
    prev: Option<Frame>,
    bodies: Vec<u8>,
    frame_lens: Vec<usize>,
    inter_blocks: Vec<u32>,
    accounted: usize,
}

impl FrameEncoder {
    pub fn new(width: usize, height: usize, cfg: CodecConfig) -> Result<Self> {
        cfg.validate()?;
        if width == 0 || height == 0 || width > u32::MAX as usize || height > u32::MAX as usize {
            return Err(Error::invalid(format!("unsupported frame extent {width}x{height}")));
        }
        Ok(FrameEncoder {
            cfg,
            width,
            height,
            prev: None,
            bodies: Vec::new(),
            frame_lens: Vec::new(),
            inter_blocks: Vec::new(),
            accounted: HEADER_LEN,
        })
    }

    pub fn push(&mut self, frame: &Frame) -> Result<()> {
        if frame.width != self.width || frame.height != self.height {
            return Err(Error::invalid(format!(
                "frame {}x{} does not match stream extent {}x{}",
                frame.width, frame.height, self.width, self.height
            )));
        }
        let n = self.width * self.height;
        if frame.planes.iter().any(|p| p.len() != n) {
            return Err(Error::invalid("plane length does not match frame extent"));
        }
        let start = self.bodies.len();
        let mut inter = 0;
        for p in 0..3 {
            let prev = self.prev.as_ref().map(|f| f.planes[p].as_slice());
            let (coded, blocks, accounted) =
                encode_plane(&frame.planes[p], prev, self.width, self.height, self.cfg.block_size);
            self.bodies.extend_from_slice(&(coded.len() as u32).to_le_bytes());
            self.bodies.extend_from_slice(&coded);
            self.accounted += 4 + accounted;
            inter += blocks;
        }
        self.frame_lens.push(self.bodies.len() - start);
        self.inter_blocks.push(inter);
        self.accounted += FRAME_ENTRY_LEN;
        self.prev = Some(frame.clone());
        Ok(())
    }

    /// Byte count tracked from the coders' own bookkeeping, independent of the buffers.
    pub fn accounted_len(&self) -> usize {
        self.accounted
    }

    pub fn finish(self) -> Result<Bitstream> {
        let mut bytes = Vec::with_capacity(self.body_len_hint());
        bytes.extend_from_slice(&(self.width as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.height as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.frame_lens.len() as u32).to_le_bytes());
        for (len, inter) in self.frame_lens.iter().zip(&self.inter_blocks) {
            let len = u32::try_from(*len).map_err(|_| Error::invalid("frame too large for the bitstream"))?;
            bytes.extend_from_slice(&len.to_le_bytes());
            bytes.extend_from_slice(&inter.to_le_bytes());
        }
        bytes.extend_from_slice(&self.bodies);
        Bitstream::from_bytes(bytes)
    }

    fn body_len_hint(&self) -> usize {
        HEADER_LEN + self.frame_lens.len() * FRAME_ENTRY_LEN + self.bodies.len()
    }
}

pub fn encode_frames(frames: &[Frame], cfg: &CodecConfig) -> Result<Bitstream> {
    let first = frames.first().ok_or_else(|| Error::invalid("no frames to encode"))?;
    let mut enc = FrameEncoder::new(first.width, first.height, *cfg)?;
    for f in frames {
        enc.push(f)?;
    }
    enc.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DecodeStats {
    pub frames: usize,
    /// Most frame bytes held at once: the frame being decoded plus retained references.
    pub peak_live_bytes: usize,
}

/// Decodes frames in order, handing each to `on_frame` as soon as it is complete.
pub fn decode_frames<F>(bs: &Bitstream, cfg: &CodecConfig, mut on_frame: F) -> Result<DecodeStats>
where
    F: FnMut(usize, &Frame) -> Result<()>,
{
    cfg.validate()?;
    let (w, h) = (bs.width(), bs.height());
    let frame_bytes = 3 * w * h;
    let mut refs: std::collections::VecDeque<Frame> = std::collections::VecDeque::new();
    let mut peak = 0;
    let mut at = bs.body_start();
    let bytes = bs.bytes();
    for i in 0..bs.frame_count() {
        let corrupt = |reason: String| Error::Decode { frame: i, reason };
        let end = at + bs.frame_len(i);
        let body = bytes
            .get(at..end)
            .ok_or_else(|| corrupt(format!("frame body needs {} bytes, stream ends early", bs.frame_len(i))))?;
        let mut frame = Frame::blank(w, h);
        let mut pos = 0;
        let mut inter = 0;
        for p in 0..3 {
            let len = read_u32(body, pos).ok_or_else(|| corrupt("plane header truncated".into()))? as usize;
            let stream = body
                .get(pos + 4..pos + 4 + len)
                .ok_or_else(|| corrupt("plane stream truncated".into()))?;
            let prev = refs.back().map(|f| f.planes[p].as_slice());
            inter += decode_plane(stream, &mut frame.planes[p], prev, w, h, cfg.block_size)
                .map_err(|e| corrupt(e.to_string()))?;
            pos += 4 + len;
        }
        if pos != body.len() {
            return Err(corrupt("frame body has trailing bytes".into()));
        }
        if inter != bs.inter_blocks(i) {
            return Err(corrupt("inter block count disagrees with the frame table".into()));
        }
        peak = peak.max((refs.len() + 1) * frame_bytes);
        on_frame(i, &frame)?;
        if refs.len() == cfg.reference_depth {
            refs.pop_front();
        }
        refs.push_back(frame);
        at = end;
    }
    if at != bytes.len() {
        return Err(Error::Protocol(format!("{} trailing bytes after the last frame", bytes.len() - at)));
    }
    Ok(DecodeStats {
        frames: bs.frame_count(),
        peak_live_bytes: peak,
    })
}

/// Decodes every frame into memory.
pub fn decode_all(bs: &Bitstream, cfg: &CodecConfig) -> Result<Vec<Frame>> {
    let mut out = Vec::with_capacity(bs.frame_count());
    decode_frames(bs, cfg, |_, f| {
        out.push(f.clone());
        Ok(())
    })?;
    Ok(out)
}
