//! Intra-frame tiling of one `[1, 3, H×D]` token tensor.
//!
//! A tiling factors `H = a_h × b_h` and `D = a_d × b_d` and lays the tensor out as a
//! `(a_h·a_d) × (b_h·b_d)` tile: head `h = hr·b_h + hc` occupies the `a_d × b_d`
//! sub-block at `(hr·a_d, hc·b_d)`, filled with its elements in their original order.
//! Heads are never split, mixed or reordered.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::ResolutionClass;

/// A validated tiling of the head and head-dim axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "LayoutRepr", into = "LayoutRepr")]
pub struct LayoutConfig {
    heads: usize,
    head_dim: usize,
    head_split: (usize, usize),
    dim_split: (usize, usize),
}

impl LayoutConfig {
    /// `head_split = (a_h, b_h)`, `dim_split = (a_d, b_d)`.
    pub fn new(
        heads: usize,
        head_dim: usize,
        head_split: (usize, usize),
        dim_split: (usize, usize),
    ) -> Result<Self> {
        check_pow2("H", heads)?;
        check_pow2("D", head_dim)?;
        let (a_h, b_h) = head_split;
        let (a_d, b_d) = dim_split;
        for (name, v) in [("a_h", a_h), ("b_h", b_h), ("a_d", a_d), ("b_d", b_d)] {
            check_pow2(name, v)?;
        }
        if a_h * b_h != heads || a_d * b_d != head_dim {
            return Err(Error::invalid(format!(
                "factor pairs ({a_h},{b_h}) x ({a_d},{b_d}) do not multiply to H={heads}, D={head_dim}"
            )));
        }
        Ok(LayoutConfig {
            heads,
            head_dim,
            head_split,
            dim_split,
        })
    }

    /// The flat layout: one row of `H × D` samples.
    pub fn identity(heads: usize, head_dim: usize) -> Result<Self> {
        Self::new(heads, head_dim, (1, heads), (1, head_dim))
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn channels(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn head_split(&self) -> (usize, usize) {
        self.head_split
    }

    pub fn dim_split(&self) -> (usize, usize) {
        self.dim_split
    }

    pub fn tile_h(&self) -> usize {
        self.head_split.0 * self.dim_split.0
    }

    pub fn tile_w(&self) -> usize {
        self.head_split.1 * self.dim_split.1
    }

    /// Deterministic ordering used for tie-breaks: `(tile_h, tile_w, a_h)`.
    pub fn sort_key(&self) -> (usize, usize, usize) {
        (self.tile_h(), self.tile_w(), self.head_split.0)
    }

    /// Tile cell (row-major index) of channel `c = h·D + d`.
    #[inline]
    pub fn cell_of(&self, channel: usize) -> usize {
        let (_, b_h) = self.head_split;
        let (a_d, b_d) = self.dim_split;
        let (h, d) = (channel / self.head_dim, channel % self.head_dim);
        let (hr, hc) = (h / b_h, h % b_h);
        let (dr, dc) = (d / b_d, d % b_d);
        (hr * a_d + dr) * self.tile_w() + hc * b_d + dc
    }

    /// `cell_of` for every channel; the forward permutation of the layout.
    pub fn tile_map(&self) -> TileMap {
        TileMap {
            cells: (0..self.channels()).map(|c| self.cell_of(c) as u32).collect(),
            tile_h: self.tile_h(),
            tile_w: self.tile_w(),
        }
    }
}

/// Precomputed channel → tile-cell permutation.
#[derive(Debug, Clone)]
pub struct TileMap {
    cells: Vec<u32>,
    tile_h: usize,
    tile_w: usize,
}

impl TileMap {
    pub fn cells(&self) -> &[u32] {
        &self.cells
    }

    pub fn tile_h(&self) -> usize {
        self.tile_h
    }

    pub fn tile_w(&self) -> usize {
        self.tile_w
    }

    pub fn channels(&self) -> usize {
        self.cells.len()
    }
}

/// Three planes of `tile_h × tile_w` unsigned samples (`int8 + 128`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tile {
    pub tile_h: usize,
    pub tile_w: usize,
    pub planes: [Vec<u8>; 3],
}

#[inline]
pub fn to_sample(v: i8) -> u8 {
    (v as u8) ^ 0x80
}

#[inline]
pub fn from_sample(s: u8) -> i8 {
    (s ^ 0x80) as i8
}

/// Lays a `[1, 3, H×D]` tensor (layer-major) out as three tile planes.
pub fn apply_layout(tensor: &[i8], cfg: &LayoutConfig) -> Result<Tile> {
    let ch = cfg.channels();
    if tensor.len() != 3 * ch {
        return Err(Error::invalid(format!(
            "tensor has {} elements, layout expects 3 x {ch}",
            tensor.len()
        )));
    }
    let map = cfg.tile_map();
    let planes = std::array::from_fn(|p| {
        let mut plane = vec![0u8; ch];
        for (c, &cell) in map.cells().iter().enumerate() {
            plane[cell as usize] = to_sample(tensor[p * ch + c]);
        }
        plane
    });
    Ok(Tile {
        tile_h: cfg.tile_h(),
        tile_w: cfg.tile_w(),
        planes,
    })
}

/// Exact inverse of [`apply_layout`].
pub fn inverse_layout(tile: &Tile, cfg: &LayoutConfig) -> Result<Vec<i8>> {
    let ch = cfg.channels();
    if tile.tile_h != cfg.tile_h()
        || tile.tile_w != cfg.tile_w()
        || tile.planes.iter().any(|p| p.len() != ch)
    {
        return Err(Error::invalid(format!(
            "tile {}x{} does not match layout {}x{}",
            tile.tile_h,
            tile.tile_w,
            cfg.tile_h(),
            cfg.tile_w()
        )));
    }
    let map = cfg.tile_map();
    let mut out = vec![0i8; 3 * ch];
    for (p, plane) in tile.planes.iter().enumerate() {
        for (c, &cell) in map.cells().iter().enumerate() {
            out[p * ch + c] = from_sample(plane[cell as usize]);
        }
    }
    Ok(out)
}

fn check_pow2(name: &str, v: usize) -> Result<()> {
    if v == 0 || !v.is_power_of_two() {
        return Err(Error::invalid(format!("{name}={v} is not a power of two")));
    }
    Ok(())
}

fn pow2_factor_pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..=n.trailing_zeros()).map(move |k| (1usize << k, n >> k))
}

/// Every power-of-two factorisation of `H` crossed with every one of `D`.
///
/// Yields `(log2 H + 1)·(log2 D + 1)` candidates sorted by [`LayoutConfig::sort_key`].
pub fn tiling_candidates(heads: usize, head_dim: usize) -> Result<Vec<LayoutConfig>> {
    check_pow2("H", heads)?;
    check_pow2("D", head_dim)?;
    let mut out = Vec::new();
    for hs in pow2_factor_pairs(heads) {
        for ds in pow2_factor_pairs(head_dim) {
            out.push(LayoutConfig::new(heads, head_dim, hs, ds)?);
        }
    }
    out.sort_by_key(LayoutConfig::sort_key);
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct LayoutRepr {
    #[serde(rename = "H")]
    heads: usize,
    #[serde(rename = "D")]
    head_dim: usize,
    tile_h: usize,
    tile_w: usize,
    head_factors: [usize; 2],
    dim_factors: [usize; 2],
    plane_layers: [usize; 3],
    resolution_tiles: Vec<(ResolutionClass, usize)>,
}

impl From<LayoutConfig> for LayoutRepr {
    fn from(c: LayoutConfig) -> Self {
        LayoutRepr {
            heads: c.heads,
            head_dim: c.head_dim,
            tile_h: c.tile_h(),
            tile_w: c.tile_w(),
            head_factors: [c.head_split.0, c.head_split.1],
            dim_factors: [c.dim_split.0, c.dim_split.1],
            plane_layers: [0, 1, 2],
            resolution_tiles: ResolutionClass::ALL
                .iter()
                .map(|r| (*r, r.tiles_per_frame()))
                .collect(),
        }
    }
}

impl TryFrom<LayoutRepr> for LayoutConfig {
    type Error = Error;

    fn try_from(r: LayoutRepr) -> Result<Self> {
        let cfg = LayoutConfig::new(
            r.heads,
            r.head_dim,
            (r.head_factors[0], r.head_factors[1]),
            (r.dim_factors[0], r.dim_factors[1]),
        )?;
        if cfg.tile_h() != r.tile_h || cfg.tile_w() != r.tile_w {
            return Err(Error::invalid("tile extents disagree with factor pairs"));
        }
        if r.plane_layers != [0, 1, 2] {
            return Err(Error::invalid("only the identity layer-to-plane assignment is supported"));
        }
        for (class, tiles) in r.resolution_tiles {
            if class.tiles_per_frame() != tiles {
                return Err(Error::invalid(format!(
                    "resolution {class} declares {tiles} tiles, expected {}",
                    class.tiles_per_frame()
                )));
            }
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn candidate_counts() {
        assert_eq!(tiling_candidates(32, 128).unwrap().len(), 48);
        let one = tiling_candidates(1, 1).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!((one[0].tile_h(), one[0].tile_w()), (1, 1));
        assert!(tiling_candidates(12, 128).is_err());
        assert!(tiling_candidates(32, 0).is_err());
    }

    #[test]
    fn candidates_are_sorted_and_distinct() {
        let c = tiling_candidates(8, 16).unwrap();
        assert_eq!(c.len(), 4 * 5);
        for w in c.windows(2) {
            assert!(w[0].sort_key() < w[1].sort_key());
        }
        assert_eq!(c[0], LayoutConfig::identity(8, 16).unwrap());
    }

    #[test]
    fn identity_layout_is_flat() {
        let cfg = LayoutConfig::identity(4, 8).unwrap();
        let tensor: Vec<i8> = (0..96).map(|i| (i as i8).wrapping_sub(40)).collect();
        let tile = apply_layout(&tensor, &cfg).unwrap();
        assert_eq!((tile.tile_h, tile.tile_w), (1, 32));
        for p in 0..3 {
            let flat: Vec<u8> = tensor[p * 32..(p + 1) * 32].iter().map(|&v| to_sample(v)).collect();
            assert_eq!(tile.planes[p], flat);
        }
    }

    #[test]
    fn lwm_shape_groups_four_heads_per_row() {
        // (8,4) x (1,128) -> (8,512)
        let cfg = LayoutConfig::new(32, 128, (8, 4), (1, 128)).unwrap();
        assert_eq!((cfg.tile_h(), cfg.tile_w()), (8, 512));
        for h in 0..32 {
            for d in 0..128 {
                let cell = cfg.cell_of(h * 128 + d);
                assert_eq!(cell / 512, h / 4, "row holds heads 4r..4r+3");
                assert_eq!(cell % 512, (h % 4) * 128 + d, "head-internal order intact");
            }
        }
    }

    #[test]
    fn every_candidate_respects_head_rules() {
        for cfg in tiling_candidates(32, 128).unwrap() {
            let map = cfg.tile_map();
            let mut source = vec![usize::MAX; cfg.channels()];
            for (c, &cell) in map.cells().iter().enumerate() {
                assert_eq!(source[cell as usize], usize::MAX, "bijection");
                source[cell as usize] = c;
            }
            // scanning the tile, each head's elements appear in ascending order
            let mut last = vec![None::<usize>; 32];
            let mut first_cell = vec![usize::MAX; 32];
            for (cell, &c) in source.iter().enumerate() {
                let (h, d) = (c / 128, c % 128);
                if let Some(prev) = last[h] {
                    assert!(d > prev);
                }
                last[h] = Some(d);
                first_cell[h] = first_cell[h].min(cell);
            }
            // head sub-blocks appear in raster order of the block grid
            let (a_d, b_d) = cfg.dim_split();
            let blocks_per_row = cfg.tile_w() / b_d;
            for (h, &cell) in first_cell.iter().enumerate() {
                let (r, c) = (cell / cfg.tile_w(), cell % cfg.tile_w());
                assert_eq!((r / a_d) * blocks_per_row + c / b_d, h);
            }
        }
    }

    #[test]
    fn round_trip_every_candidate() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for cfg in tiling_candidates(32, 128).unwrap() {
            let tensor: Vec<i8> = (0..3 * 4096).map(|_| rng.gen()).collect();
            let tile = apply_layout(&tensor, &cfg).unwrap();
            assert_eq!(inverse_layout(&tile, &cfg).unwrap(), tensor);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let cfg = LayoutConfig::identity(2, 2).unwrap();
        assert!(apply_layout(&[0; 11], &cfg).is_err());
        let tile = Tile {
            tile_h: 2,
            tile_w: 2,
            planes: [vec![0; 4], vec![0; 4], vec![0; 4]],
        };
        assert!(inverse_layout(&tile, &cfg).is_err());
        assert!(LayoutConfig::new(4, 4, (2, 4), (1, 4)).is_err());
    }

    #[test]
    fn json_round_trip_validates() {
        let cfg = LayoutConfig::new(32, 128, (8, 4), (1, 128)).unwrap();
        let s = serde_json::to_string(&cfg).unwrap();
        assert!(s.contains("\"tile_h\":8") && s.contains("\"tile_w\":512"));
        let back: LayoutConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, cfg);
        let bad = s.replace("\"tile_h\":8", "\"tile_h\":4");
        assert!(serde_json::from_str::<LayoutConfig>(&bad).is_err());
    }

    proptest! {
        #[test]
        fn random_tensors_round_trip(seed in any::<u64>(), hk in 0u32..6, dk in 0u32..8, pick in any::<prop::sample::Index>()) {
            let (h, d) = (1usize << hk, 1usize << dk);
            let cands = tiling_candidates(h, d).unwrap();
            let cfg = cands[pick.index(cands.len())];
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let tensor: Vec<i8> = (0..3 * h * d).map(|_| rng.gen()).collect();
            let tile = apply_layout(&tensor, &cfg).unwrap();
            prop_assert_eq!(inverse_layout(&tile, &cfg).unwrap(), tensor);
        }
    }
}
