//! Lossless predictive frame codec and multi-resolution chunk packing.

pub mod container;
pub mod frame;
pub mod range;

use serde::Serialize;

pub use container::{
    cache_id_hex, parse_cache_id, ChunkContainer, ChunkMeta, ContainerHeader, ResolutionEntry, CHUNK_TOKENS,
};
pub use frame::{
    decode_all, decode_frames, encode_frames, Bitstream, CodecConfig, DecodeStats, FrameEncoder,
};

use crate::error::{Error, Result};
use crate::kv::{KvCache, QuantizedKv};
use crate::layout::{
    plan_inter_frame, slice_tokens, unslice_tokens, FramePlan, LayoutConfig, LayoutEncoder, ResolutionClass, TokenTensor,
};

/// Identity of one chunk inside a cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkId {
    pub cache_id: [u8; 16],
    pub chunk_index: u32,
    pub token_start: u32,
    pub layer_triplet_index: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PackOptions {
    pub codec: CodecConfig,
    /// Largest slab a chunk may hold.
    pub chunk_tokens: usize,
}

impl Default for PackOptions {
    fn default() -> Self {
        PackOptions {
            codec: CodecConfig::default(),
            chunk_tokens: CHUNK_TOKENS,
        }
    }
}

impl ContainerHeader {
    /// Frame plan used for one resolution entry.
    pub fn plan(&self, class: ResolutionClass) -> Result<FramePlan> {
        plan_inter_frame(self.token_count as usize, class, &self.meta.layout)
    }
}

/// Encodes a slab's token tensors as one frame sequence under `plan`.
pub fn encode_plan(tensors: &[TokenTensor], plan: &FramePlan, layout: &LayoutConfig, codec: &CodecConfig) -> Result<Bitstream> {
    if tensors.len() != plan.tensors {
        return Err(Error::invalid("tensor count does not match the frame plan"));
    }
    let map = layout.tile_map();
    let mut enc = FrameEncoder::new(plan.frame_width(), plan.frame_height(), *codec)?;
    for f in 0..plan.frames {
        enc.push(&plan.build_frame(f, tensors, &map))?;
    }
    enc.finish()
}

/// Encodes a three-layer slab at every requested resolution.
pub fn pack_chunk(
    slab: &QuantizedKv,
    layout: &LayoutConfig,
    resolutions: &[ResolutionClass],
    id: ChunkId,
    opts: &PackOptions,
) -> Result<ChunkContainer> {
    let mut classes: Vec<ResolutionClass> = Vec::new();
    for r in resolutions {
        if !classes.contains(r) {
            classes.push(*r);
        }
    }
    if classes.is_empty() {
        return Err(Error::invalid("at least one resolution is required"));
    }
    let shape = slab.shape();
    if shape.heads != layout.heads() || shape.head_dim != layout.head_dim() {
        return Err(Error::invalid(format!(
            "layout is for H={}, D={} but the slab has H={}, D={}",
            layout.heads(),
            layout.head_dim(),
            shape.heads,
            shape.head_dim
        )));
    }
    if shape.tokens > opts.chunk_tokens {
        return Err(Error::invalid(format!(
            "slab of {} tokens exceeds the chunk capacity {}",
            shape.tokens, opts.chunk_tokens
        )));
    }
    let tensors = slice_tokens(slab)?;
    let plans = classes
        .iter()
        .map(|&r| plan_inter_frame(tensors.len(), r, layout))
        .collect::<Result<Vec<_>>>()?;
    let encoded: Vec<Result<Bitstream>> = std::thread::scope(|s| {
        let handles: Vec<_> = plans
            .iter()
            .map(|plan| s.spawn(|| encode_plan(&tensors, plan, layout, &opts.codec)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("encoder thread panicked")).collect()
    });
    let mut payloads = Vec::with_capacity(classes.len());
    for (class, bs) in classes.iter().zip(encoded) {
        payloads.push((*class, bs?.into_bytes()));
    }
    let header = ContainerHeader {
        cache_id: id.cache_id,
        chunk_index: id.chunk_index,
        token_start: id.token_start,
        token_count: u32::try_from(shape.tokens).map_err(|_| Error::invalid("too many tokens"))?,
        layer_triplet_index: id.layer_triplet_index,
        meta: ChunkMeta {
            layout: *layout,
            group_size: slab.group_size(),
            scales: slab.scales().to_vec(),
        },
        entries: Vec::new(),
    };
    ChunkContainer::build(header, payloads)
}

/// Decodes one resolution entry back to the slab.
pub fn unpack_chunk(container: &ChunkContainer, class: ResolutionClass, codec: &CodecConfig) -> Result<QuantizedKv> {
    let header = container.header();
    let plan = header.plan(class)?;
    let bs = Bitstream::from_bytes(container.payload(class)?.to_vec())?;
    restore_slab(&bs, &plan, header, codec)
}

/// Decodes a bitstream produced under `plan` into the slab it encodes.
pub fn restore_slab(bs: &Bitstream, plan: &FramePlan, header: &ContainerHeader, codec: &CodecConfig) -> Result<QuantizedKv> {
    check_stream_matches(bs, plan)?;
    let layout = &header.meta.layout;
    let map = layout.tile_map();
    let mut tensors: Vec<Option<TokenTensor>> = vec![None; plan.tensors];
    decode_frames(bs, codec, |f, frame| {
        for (t, row, col) in plan.tiles_in_frame(f) {
            tensors[t] = Some(plan.extract_tensor(frame, row, col, &map));
        }
        Ok(())
    })?;
    let tensors = tensors
        .into_iter()
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Protocol("bitstream did not cover every token".into()))?;
    unslice_tokens(
        &tensors,
        layout.heads(),
        layout.head_dim(),
        header.meta.group_size,
        header.meta.scales.clone(),
    )
}

pub(crate) fn check_stream_matches(bs: &Bitstream, plan: &FramePlan) -> Result<()> {
    if bs.width() != plan.frame_width() || bs.height() != plan.frame_height() || bs.frame_count() != plan.frames {
        return Err(Error::Protocol(format!(
            "bitstream {}x{}x{} does not match plan {}x{}x{}",
            bs.width(),
            bs.height(),
            bs.frame_count(),
            plan.frame_width(),
            plan.frame_height(),
            plan.frames
        )));
    }
    Ok(())
}

/// Sizes slabs by encoding them with the frame codec at one resolution class.
#[derive(Debug, Clone, Copy)]
pub struct CodecSizer {
    pub resolution: ResolutionClass,
    pub codec: CodecConfig,
}

impl Default for CodecSizer {
    fn default() -> Self {
        CodecSizer {
            resolution: ResolutionClass::R240,
            codec: CodecConfig::default(),
        }
    }
}

impl LayoutEncoder for CodecSizer {
    fn encoded_size(&self, slab: &QuantizedKv, layout: &LayoutConfig) -> Result<usize> {
        let tensors = slice_tokens(slab)?;
        let plan = plan_inter_frame(tensors.len(), self.resolution, layout)?;
        Ok(encode_plan(&tensors, &plan, layout, &self.codec)?.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CompressionReport {
    pub fp16_bytes: usize,
    pub int8_bytes: usize,
    pub encoded_bytes: usize,
    /// Raw 16-bit size over encoded size.
    pub ratio: f64,
    pub int8_ratio: f64,
}

pub fn compression_ratio(raw: &KvCache, encoded_bytes: usize) -> Result<CompressionReport> {
    if encoded_bytes == 0 {
        return Err(Error::invalid("encoded size must be positive"));
    }
    let n = raw.shape().len();
    Ok(CompressionReport {
        fp16_bytes: 2 * n,
        int8_bytes: n,
        encoded_bytes,
        ratio: (2 * n) as f64 / encoded_bytes as f64,
        int8_ratio: n as f64 / encoded_bytes as f64,
    })
}
