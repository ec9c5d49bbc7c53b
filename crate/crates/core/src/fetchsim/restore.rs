//! Frame-wise restoration of a decoded chunk into paged memory.

use serde::Serialize;

use crate::codec::{check_stream_matches, decode_frames, Bitstream, CodecConfig, ContainerHeader};
use crate::error::{Error, Result};
use crate::layout::FramePlan;
use crate::paged::PagedMemory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RestoreReport {
    pub frames: usize,
    pub tokens_written: usize,
    pub slots_written: usize,
    /// Most decoded-frame bytes alive at once.
    pub peak_buffer_bytes: usize,
}

fn check_memory(header: &ContainerHeader, mem: &PagedMemory) -> Result<()> {
    let layout = &header.meta.layout;
    if mem.slot_len() != layout.channels() {
        return Err(Error::invalid(format!(
            "memory slots hold {} values, chunk rows hold {}",
            mem.slot_len(),
            layout.channels()
        )));
    }
    if 3 * header.layer_triplet_index as usize + 3 > mem.layers() {
        return Err(Error::invalid("chunk layers fall outside the paged memory"));
    }
    Ok(())
}

fn write_frame_tiles(
    plan: &FramePlan,
    header: &ContainerHeader,
    frame_index: usize,
    frame: &crate::layout::Frame,
    map: &crate::layout::TileMap,
    mem: &mut PagedMemory,
) -> Result<usize> {
    let ch = map.channels();
    let base_layer = 3 * header.layer_triplet_index as usize;
    let mut n = 0;
    for (t, row, col) in plan.tiles_in_frame(frame_index) {
        let tensor = plan.extract_tensor(frame, row, col, map);
        let token = header.token_start as usize + t;
        for p in 0..3 {
            mem.write(token, base_layer + p, &tensor.0[p * ch..(p + 1) * ch])?;
        }
        n += 1;
    }
    Ok(n)
}

/// Maps each frame's tiles into memory as soon as the frame is decoded.
pub fn restore_stream(
    bs: &Bitstream,
    plan: &FramePlan,
    header: &ContainerHeader,
    codec: &CodecConfig,
    mem: &mut PagedMemory,
) -> Result<RestoreReport> {
    check_stream_matches(bs, plan)?;
    check_memory(header, mem)?;
    let map = header.meta.layout.tile_map();
    let mut tokens = 0;
    let stats = decode_frames(bs, codec, |f, frame| {
        tokens += write_frame_tiles(plan, header, f, frame, &map, mem)?;
        Ok(())
    })?;
    Ok(RestoreReport {
        frames: stats.frames,
        tokens_written: tokens,
        slots_written: 3 * tokens,
        peak_buffer_bytes: stats.peak_live_bytes,
    })
}

/// Baseline that decodes the whole chunk before writing any slot.
pub fn restore_chunkwise(
    bs: &Bitstream,
    plan: &FramePlan,
    header: &ContainerHeader,
    codec: &CodecConfig,
    mem: &mut PagedMemory,
) -> Result<RestoreReport> {
    check_stream_matches(bs, plan)?;
    check_memory(header, mem)?;
    let frames = crate::codec::decode_all(bs, codec)?;
    let peak = frames.iter().map(|f| f.byte_len()).sum();
    let map = header.meta.layout.tile_map();
    let mut tokens = 0;
    for (i, f) in frames.iter().enumerate() {
        tokens += write_frame_tiles(plan, header, i, f, &map, mem)?;
    }
    Ok(RestoreReport {
        frames: frames.len(),
        tokens_written: tokens,
        slots_written: 3 * tokens,
        peak_buffer_bytes: peak,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{pack_chunk, ChunkContainer, ChunkId, PackOptions};
    use crate::kv::{gen_synthetic_kv, quantize, KvShape, QuantizedKv};
    use crate::layout::{LayoutConfig, ResolutionClass};

    fn packed(tokens: usize, triplet: u8) -> (QuantizedKv, ChunkContainer) {
        let kv = gen_synthetic_kv(KvShape::new(tokens, 3, 4, 32).unwrap(), 0.9, 5).unwrap();
        let q = quantize(&kv, 32).unwrap();
        let layout = LayoutConfig::new(4, 32, (2, 2), (1, 32)).unwrap();
        let id = ChunkId { cache_id: [2; 16], chunk_index: 0, token_start: 100, layer_triplet_index: triplet };
        let c = pack_chunk(&q, &layout, &[ResolutionClass::R240], id, &PackOptions::default()).unwrap();
        (q, c)
    }

    fn stream(c: &ChunkContainer) -> (Bitstream, FramePlan) {
        let bs = Bitstream::from_bytes(c.payload(ResolutionClass::R240).unwrap().to_vec()).unwrap();
        (bs, c.header().plan(ResolutionClass::R240).unwrap())
    }

    #[test]
    fn restores_slab_bit_exactly() {
        let (q, c) = packed(200, 1);
        let (bs, plan) = stream(&c);
        let mut mem = PagedMemory::new(16, 6, 128).unwrap();
        let r = restore_stream(&bs, &plan, c.header(), &CodecConfig::default(), &mut mem).unwrap();
        assert_eq!(r.tokens_written, 200);
        assert_eq!(r.frames, plan.frames);
        for t in 0..200 {
            for l in 0..3 {
                assert_eq!(mem.read(100 + t, 3 + l).unwrap(), q.row(t, l));
            }
            assert!(!mem.is_written(100 + t, 0));
        }
        assert_eq!(mem.allocated_bytes(), 200 * 3 * 128);
    }

    #[test]
    fn frame_wise_peak_is_bounded_by_references() {
        let (_, c) = packed(200, 0);
        let (bs, plan) = stream(&c);
        let cfg = CodecConfig::default();
        let mut a = PagedMemory::new(16, 3, 128).unwrap();
        let mut b = PagedMemory::new(16, 3, 128).unwrap();
        let fw = restore_stream(&bs, &plan, c.header(), &cfg, &mut a).unwrap();
        let cw = restore_chunkwise(&bs, &plan, c.header(), &cfg, &mut b).unwrap();
        assert_eq!(fw.peak_buffer_bytes, 2 * plan.frame_bytes());
        assert_eq!(cw.peak_buffer_bytes, plan.frames * plan.frame_bytes());
        assert_eq!(fw.tokens_written, cw.tokens_written);
    }

    #[test]
    fn single_frame_chunk_peaks_match() {
        let (_, c) = packed(10, 0);
        let (bs, plan) = stream(&c);
        assert_eq!(plan.frames, 1);
        let cfg = CodecConfig::default();
        let fw = restore_stream(&bs, &plan, c.header(), &cfg, &mut PagedMemory::new(16, 3, 128).unwrap()).unwrap();
        let cw = restore_chunkwise(&bs, &plan, c.header(), &cfg, &mut PagedMemory::new(16, 3, 128).unwrap()).unwrap();
        assert_eq!(fw.peak_buffer_bytes, cw.peak_buffer_bytes);
    }

    #[test]
    fn double_restore_conflicts() {
        let (_, c) = packed(20, 0);
        let (bs, plan) = stream(&c);
        let mut mem = PagedMemory::new(16, 3, 128).unwrap();
        restore_stream(&bs, &plan, c.header(), &CodecConfig::default(), &mut mem).unwrap();
        let err = restore_stream(&bs, &plan, c.header(), &CodecConfig::default(), &mut mem).unwrap_err();
        assert!(matches!(err, Error::Conflict { .. }));
        let mut small = PagedMemory::new(16, 3, 64).unwrap();
        assert!(restore_stream(&bs, &plan, c.header(), &CodecConfig::default(), &mut small).is_err());
    }
}
