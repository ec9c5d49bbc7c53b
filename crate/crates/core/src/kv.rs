//! KV-cache tensors, 8-bit quantization and the synthetic KV generator.
//!
//! Tensors are stored flat in `[token][layer][head][dim]` order.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of channel elements sharing one quantization scale.
pub const DEFAULT_GROUP_SIZE: usize = 128;

/// Largest magnitude of a quantized sample.
pub const QUANT_MAX: i32 = 127;

/// Extents of a `[token, layer, head, dim]` tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KvShape {
    pub tokens: usize,
    pub layers: usize,
    #[serde(rename = "H")]
    pub heads: usize,
    #[serde(rename = "D")]
    pub head_dim: usize,
}

impl KvShape {
    pub fn new(tokens: usize, layers: usize, heads: usize, head_dim: usize) -> Result<Self> {
        let shape = KvShape {
            tokens,
            layers,
            heads,
            head_dim,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens == 0 || self.layers == 0 || self.heads == 0 || self.head_dim == 0 {
            return Err(Error::invalid(format!("all KV extents must be >= 1, got {self:?}")));
        }
        Ok(())
    }

    /// `H × D`, the flattened per-layer channel count.
    pub fn channels(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn len(&self) -> usize {
        self.tokens * self.layers * self.channels()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, token: usize, layer: usize, head: usize, dim: usize) -> usize {
        ((token * self.layers + layer) * self.heads + head) * self.head_dim + dim
    }

    /// Layer count rounded up to the next multiple of three.
    pub fn padded_layers(&self) -> usize {
        self.layers.div_ceil(3) * 3
    }
}

/// Floating-point KV cache.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    shape: KvShape,
    data: Vec<f32>,
}

impl KvCache {
    pub fn new(shape: KvShape, data: Vec<f32>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.len() {
            return Err(Error::invalid(format!(
                "data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                shape.len()
            )));
        }
        Ok(KvCache { shape, data })
    }

    pub fn zeros(shape: KvShape) -> Result<Self> {
        shape.validate()?;
        Ok(KvCache {
            data: vec![0.0; shape.len()],
            shape,
        })
    }

    pub fn shape(&self) -> KvShape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, token: usize, layer: usize, head: usize, dim: usize) -> f32 {
        self.data[self.shape.index(token, layer, head, dim)]
    }

    /// Appends zero layers so the layer count is a multiple of three.
    pub fn padded_to_triplets(&self) -> KvCache {
        let shape = self.shape;
        let layers = shape.padded_layers();
        if layers == shape.layers {
            return self.clone();
        }
        let ch = shape.channels();
        let mut data = Vec::with_capacity(shape.tokens * layers * ch);
        for t in 0..shape.tokens {
            let start = t * shape.layers * ch;
            data.extend_from_slice(&self.data[start..start + shape.layers * ch]);
            data.resize(data.len() + (layers - shape.layers) * ch, 0.0);
        }
        KvCache {
            shape: KvShape { layers, ..shape },
            data,
        }
    }
}

/// Integer-quantized KV cache with one scale per `(layer, channel group)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedKv {
    shape: KvShape,
    group_size: usize,
    values: Vec<i8>,
    scales: Vec<f32>,
}

impl QuantizedKv {
    pub fn new(shape: KvShape, group_size: usize, values: Vec<i8>, scales: Vec<f32>) -> Result<Self> {
        shape.validate()?;
        check_group_size(shape, group_size)?;
        if values.len() != shape.len() {
            return Err(Error::invalid(format!(
                "value count {} does not match shape {:?}",
                values.len(),
                shape
            )));
        }
        let groups = shape.layers * shape.channels() / group_size;
        if scales.len() != groups {
            return Err(Error::invalid(format!(
                "expected {groups} scales, got {}",
                scales.len()
            )));
        }
        if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid("scales must be finite and positive"));
        }
        Ok(QuantizedKv {
            shape,
            group_size,
            values,
            scales,
        })
    }

    pub fn shape(&self) -> KvShape {
        self.shape
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn groups_per_layer(&self) -> usize {
        self.shape.channels() / self.group_size
    }

    /// Scales of one layer, one per channel group.
    pub fn layer_scales(&self, layer: usize) -> &[f32] {
        let g = self.groups_per_layer();
        &self.scales[layer * g..(layer + 1) * g]
    }

    pub fn scale_for(&self, layer: usize, channel: usize) -> f32 {
        self.scales[layer * self.groups_per_layer() + channel / self.group_size]
    }

    pub fn get(&self, token: usize, layer: usize, head: usize, dim: usize) -> i8 {
        self.values[self.shape.index(token, layer, head, dim)]
    }

    /// The `H × D` channel row of one `(token, layer)` pair.
    pub fn row(&self, token: usize, layer: usize) -> &[i8] {
        let ch = self.shape.channels();
        let start = (token * self.shape.layers + layer) * ch;
        &self.values[start..start + ch]
    }

    /// Appends all-zero layers (scale 1) up to a multiple of three.
    pub fn padded_to_triplets(&self) -> QuantizedKv {
        let shape = self.shape;
        let layers = shape.padded_layers();
        if layers == shape.layers {
            return self.clone();
        }
        let ch = shape.channels();
        let mut values = Vec::with_capacity(shape.tokens * layers * ch);
        for t in 0..shape.tokens {
            let start = t * shape.layers * ch;
            values.extend_from_slice(&self.values[start..start + shape.layers * ch]);
            values.resize(values.len() + (layers - shape.layers) * ch, 0);
        }
        let mut scales = self.scales.clone();
        scales.resize(layers * self.groups_per_layer(), 1.0);
        QuantizedKv {
            shape: KvShape { layers, ..shape },
            group_size: self.group_size,
            values,
            scales,
        }
    }

    /// Number of three-layer slabs after padding.
    pub fn layer_triplets(&self) -> usize {
        self.shape.padded_layers() / 3
    }

    /// Layers `3·triplet .. 3·triplet+3` of a token range. The cache must already be
    /// padded to a multiple of three layers.
    pub fn slab(&self, triplet: usize, tokens: Range<usize>) -> Result<QuantizedKv> {
        let shape = self.shape;
        self.check_slab(triplet, &tokens)?;
        let ch = shape.channels();
        let mut values = Vec::with_capacity(tokens.len() * 3 * ch);
        for t in tokens.clone() {
            let start = (t * shape.layers + 3 * triplet) * ch;
            values.extend_from_slice(&self.values[start..start + 3 * ch]);
        }
        let g = self.groups_per_layer();
        let scales = self.scales[3 * triplet * g..(3 * triplet + 3) * g].to_vec();
        QuantizedKv::new(
            KvShape::new(tokens.len(), 3, shape.heads, shape.head_dim)?,
            self.group_size,
            values,
            scales,
        )
    }

    /// Overwrites the values of one slab in place; the inverse of [`QuantizedKv::slab`].
    pub fn set_slab(&mut self, triplet: usize, token_start: usize, slab: &QuantizedKv) -> Result<()> {
        let shape = self.shape;
        let s = slab.shape;
        if s.layers != 3 || s.heads != shape.heads || s.head_dim != shape.head_dim {
            return Err(Error::invalid("slab shape does not match the cache"));
        }
        self.check_slab(triplet, &(token_start..token_start + s.tokens))?;
        let ch = shape.channels();
        for t in 0..s.tokens {
            let dst = ((token_start + t) * shape.layers + 3 * triplet) * ch;
            self.values[dst..dst + 3 * ch].copy_from_slice(&slab.values[t * 3 * ch..(t + 1) * 3 * ch]);
        }
        Ok(())
    }

    fn check_slab(&self, triplet: usize, tokens: &Range<usize>) -> Result<()> {
        let shape = self.shape;
        if shape.layers % 3 != 0 {
            return Err(Error::invalid("slab extraction needs layers padded to a multiple of three"));
        }
        if triplet >= shape.layers / 3 || tokens.is_empty() || tokens.end > shape.tokens {
            return Err(Error::invalid(format!(
                "slab (triplet {triplet}, tokens {tokens:?}) out of range for {shape:?}"
            )));
        }
        Ok(())
    }
}

fn check_group_size(shape: KvShape, group_size: usize) -> Result<()> {
    if group_size == 0 || shape.channels() % group_size != 0 {
        return Err(Error::invalid(format!(
            "group_size {group_size} must be positive and divide the channel count {}",
            shape.channels()
        )));
    }
    Ok(())
}

/// Symmetric per-(layer, channel-group) 8-bit quantization.
///
/// The scale of a group is `max_abs / 127` taken over every token; integers are
/// `round_half_even(x / scale)` clamped to `[-127, 127]`. All-zero groups get scale 1.
pub fn quantize(kv: &KvCache, group_size: usize) -> Result<QuantizedKv> {
    let shape = kv.shape();
    check_group_size(shape, group_size)?;
    if kv.data.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("cannot quantize non-finite values"));
    }
    let ch = shape.channels();
    let groups = ch / group_size;

    let mut max_abs = vec![0.0f32; shape.layers * groups];
    for t in 0..shape.tokens {
        for l in 0..shape.layers {
            let row = &kv.data[(t * shape.layers + l) * ch..][..ch];
            for (g, chunk) in row.chunks_exact(group_size).enumerate() {
                let m = &mut max_abs[l * groups + g];
                for &x in chunk {
                    *m = m.max(x.abs());
                }
            }
        }
    }

    let mut values = vec![0i8; shape.len()];
    for t in 0..shape.tokens {
        for l in 0..shape.layers {
            let base = (t * shape.layers + l) * ch;
            for c in 0..ch {
                let m = max_abs[l * groups + c / group_size];
                if m > 0.0 {
                    // x / max_abs * 127 keeps exact halves exact (e.g. -0.25 / 0.5 * 127 = -63.5).
                    let q = (kv.data[base + c] / m * QUANT_MAX as f32).round_ties_even();
                    values[base + c] = q.clamp(-QUANT_MAX as f32, QUANT_MAX as f32) as i8;
                }
            }
        }
    }

    let scales = max_abs
        .into_iter()
        .map(|m| if m > 0.0 { m / QUANT_MAX as f32 } else { 1.0 })
        .collect();
    Ok(QuantizedKv {
        shape,
        group_size,
        values,
        scales,
    })
}

pub fn dequantize(q: &QuantizedKv) -> KvCache {
    let shape = q.shape;
    let ch = shape.channels();
    let mut data = Vec::with_capacity(shape.len());
    for t in 0..shape.tokens {
        for l in 0..shape.layers {
            let scales = q.layer_scales(l);
            for (c, &v) in q.row(t, l).iter().enumerate() {
                data.push(v as f32 * scales[c / q.group_size]);
            }
        }
    }
    debug_assert_eq!(data.len(), shape.tokens * shape.layers * ch);
    KvCache { shape, data }
}

/// Parameters of a synthetic KV cache; also the on-disk corpus spec format.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub tokens: usize,
    pub layers: usize,
    #[serde(rename = "H")]
    pub heads: usize,
    #[serde(rename = "D")]
    pub head_dim: usize,
    pub smoothness: f32,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn shape(&self) -> KvShape {
        KvShape {
            tokens: self.tokens,
            layers: self.layers,
            heads: self.heads,
            head_dim: self.head_dim,
        }
    }

    pub fn generate(&self) -> Result<KvCache> {
        gen_synthetic_kv(self.shape(), self.smoothness, self.seed)
    }
}

/// Token-smooth synthetic KV: every `(layer, head, dim)` channel is an independent
/// AR(1) sequence over tokens, `x_t = s·x_{t-1} + (1 - s)·n_t`, with `x_0 = n_0`
/// and standard normal `n_t`.
pub fn gen_synthetic_kv(shape: KvShape, smoothness: f32, seed: u64) -> Result<KvCache> {
    shape.validate()?;
    if !(0.0..=1.0).contains(&smoothness) {
        return Err(Error::invalid(format!(
            "token_smoothness must lie in [0, 1], got {smoothness}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_token = shape.layers * shape.channels();
    let mut data = Vec::with_capacity(shape.len());
    let keep = 1.0 - smoothness;
    for t in 0..shape.tokens {
        for i in 0..per_token {
            let noise: f32 = StandardNormal.sample(&mut rng);
            let x = if t == 0 {
                noise
            } else {
                smoothness * data[(t - 1) * per_token + i] + keep * noise
            };
            data.push(x);
        }
    }
    Ok(KvCache { shape, data })
}
