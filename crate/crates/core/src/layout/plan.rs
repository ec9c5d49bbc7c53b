//! Inter-frame placement: token slicing, resolution classes and frame plans.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::QuantizedKv;
use crate::layout::tiling::{from_sample, to_sample, LayoutConfig, TileMap};

/// Largest frame side accepted by the frame planner.
pub const MAX_FRAME_EXTENT: usize = 16_384;

/// Resolution classes, defined by how many tiles one frame carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ResolutionClass {
    R240,
    R480,
    R640,
    R1080,
}

impl ResolutionClass {
    /// Ascending order of tiles per frame.
    pub const ALL: [ResolutionClass; 4] = [
        ResolutionClass::R240,
        ResolutionClass::R480,
        ResolutionClass::R640,
        ResolutionClass::R1080,
    ];

    pub fn tiles_per_frame(self) -> usize {
        match self {
            ResolutionClass::R240 => 16,
            ResolutionClass::R480 => 64,
            ResolutionClass::R640 => 96,
            ResolutionClass::R1080 => 256,
        }
    }

    /// Wire/on-disk code.
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Self::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown resolution class code {code}")))
    }
}

impl fmt::Display for ResolutionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ResolutionClass::R240 => "R240",
            ResolutionClass::R480 => "R480",
            ResolutionClass::R640 => "R640",
            ResolutionClass::R1080 => "R1080",
        };
        f.write_str(s)
    }
}

impl FromStr for ResolutionClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().trim_start_matches(['R', 'r']).trim_end_matches(['P', 'p']);
        match t {
            "240" => Ok(ResolutionClass::R240),
            "480" => Ok(ResolutionClass::R480),
            "640" => Ok(ResolutionClass::R640),
            "1080" => Ok(ResolutionClass::R1080),
            _ => Err(Error::invalid(format!("unknown resolution class '{s}'"))),
        }
    }
}

/// Three planes of unsigned samples, one per layer of a three-layer slab.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub planes: [Vec<u8>; 3],
}

impl Frame {
    /// A frame whose samples all encode the quantized value 0.
    pub fn blank(width: usize, height: usize) -> Frame {
        let n = width * height;
        Frame {
            width,
            height,
            planes: std::array::from_fn(|_| vec![to_sample(0); n]),
        }
    }

    pub fn plane(&self, p: usize) -> PlaneRef<'_> {
        PlaneRef {
            width: self.width,
            height: self.height,
            data: &self.planes[p],
        }
    }

    pub fn byte_len(&self) -> usize {
        3 * self.width * self.height
    }
}

/// Borrowed single-channel image.
#[derive(Debug, Clone, Copy)]
pub struct PlaneRef<'a> {
    pub width: usize,
    pub height: usize,
    pub data: &'a [u8],
}

/// One `[1, 3, H×D]` token tensor, layer-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenTensor(pub Vec<i8>);

/// Slices a three-layer slab along the token axis.
pub fn slice_tokens(slab: &QuantizedKv) -> Result<Vec<TokenTensor>> {
    let shape = slab.shape();
    if shape.layers != 3 {
        return Err(Error::invalid(format!(
            "token slicing needs a three-layer slab, got {} layers",
            shape.layers
        )));
    }
    let per = 3 * shape.channels();
    Ok(slab.values().chunks_exact(per).map(|c| TokenTensor(c.to_vec())).collect())
}

/// Reassembles a slab from its token tensors.
pub fn unslice_tokens(
    tensors: &[TokenTensor],
    heads: usize,
    head_dim: usize,
    group_size: usize,
    scales: Vec<f32>,
) -> Result<QuantizedKv> {
    let shape = crate::kv::KvShape::new(tensors.len(), 3, heads, head_dim)?;
    let mut values = Vec::with_capacity(shape.len());
    for t in tensors {
        if t.0.len() != 3 * shape.channels() {
            return Err(Error::invalid("token tensor length mismatch"));
        }
        values.extend_from_slice(&t.0);
    }
    QuantizedKv::new(shape, group_size, values, scales)
}

/// Where each token tensor of a chunk lands in the frame sequence.
///
/// Tensors are split into consecutive groups of `group_len` (F). Group `g` owns tile
/// slot `g` in every frame and its tensors occupy frames `0..F` in token order, so
/// token-adjacent tensors sit at the same position in consecutive frames.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FramePlan {
    pub tensors: usize,
    pub group_len: usize,
    pub frames: usize,
    pub tile_h: usize,
    pub tile_w: usize,
    pub tiles_per_frame: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub resolution: Option<ResolutionClass>,
}

/// Tile position of one tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Placement {
    pub frame: usize,
    pub row: usize,
    pub col: usize,
}

pub fn plan_inter_frame(
    tensors: usize,
    resolution: ResolutionClass,
    layout: &LayoutConfig,
) -> Result<FramePlan> {
    let mut plan = plan_with_tiles(tensors, resolution.tiles_per_frame(), layout)?;
    plan.resolution = Some(resolution);
    Ok(plan)
}

/// Frame plan for an arbitrary tiles-per-frame count.
pub fn plan_with_tiles(tensors: usize, tiles_per_frame: usize, layout: &LayoutConfig) -> Result<FramePlan> {
    if tensors == 0 {
        return Err(Error::invalid("a frame plan needs at least one tensor"));
    }
    if tiles_per_frame == 0 {
        return Err(Error::invalid("tiles_per_frame must be positive"));
    }
    let (tile_h, tile_w) = (layout.tile_h(), layout.tile_w());
    let (grid_rows, grid_cols) = choose_grid(tiles_per_frame, tile_h, tile_w).ok_or_else(|| {
        Error::invalid(format!(
            "tile {tile_h}x{tile_w} does not fit a {tiles_per_frame}-tile frame within {MAX_FRAME_EXTENT} pixels"
        ))
    })?;
    let group_len = tensors.div_ceil(tiles_per_frame);
    Ok(FramePlan {
        tensors,
        group_len,
        frames: group_len,
        tile_h,
        tile_w,
        tiles_per_frame,
        grid_rows,
        grid_cols,
        resolution: None,
    })
}

/// Grid with `rows × cols = tiles` closest to square; fewer rows on ties.
fn choose_grid(tiles: usize, tile_h: usize, tile_w: usize) -> Option<(usize, usize)> {
    let mut best: Option<((usize, usize), f64)> = None;
    for rows in 1..=tiles {
        if tiles % rows != 0 {
            continue;
        }
        let cols = tiles / rows;
        let (h, w) = (rows * tile_h, cols * tile_w);
        if h > MAX_FRAME_EXTENT || w > MAX_FRAME_EXTENT {
            continue;
        }
        let skew = ((h as f64) / (w as f64)).ln().abs();
        if best.is_none_or(|(_, s)| skew < s - 1e-12) {
            best = Some(((rows, cols), skew));
        }
    }
    best.map(|(g, _)| g)
}

impl FramePlan {
    pub fn frame_width(&self) -> usize {
        self.grid_cols * self.tile_w
    }

    pub fn frame_height(&self) -> usize {
        self.grid_rows * self.tile_h
    }

    pub fn frame_bytes(&self) -> usize {
        3 * self.frame_width() * self.frame_height()
    }

    /// Number of tile slots in use (groups).
    pub fn groups(&self) -> usize {
        self.tensors.div_ceil(self.group_len)
    }

    pub fn placement(&self, tensor: usize) -> Placement {
        let slot = tensor / self.group_len;
        Placement {
            frame: tensor % self.group_len,
            row: slot / self.grid_cols,
            col: slot % self.grid_cols,
        }
    }

    /// The tensor stored at a tile position, or `None` for zero padding.
    pub fn tensor_at(&self, frame: usize, row: usize, col: usize) -> Option<usize> {
        if frame >= self.frames || row >= self.grid_rows || col >= self.grid_cols {
            return None;
        }
        let idx = (row * self.grid_cols + col) * self.group_len + frame;
        (idx < self.tensors).then_some(idx)
    }

    /// Validity bitmap of one frame: whether each slot (row-major) holds a tensor.
    pub fn valid_slots(&self, frame: usize) -> Vec<bool> {
        (0..self.tiles_per_frame)
            .map(|s| self.tensor_at(frame, s / self.grid_cols, s % self.grid_cols).is_some())
            .collect()
    }

    /// `(tensor, row, col)` for the valid tiles of one frame, in slot order.
    pub fn tiles_in_frame(&self, frame: usize) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        (0..self.tiles_per_frame).filter_map(move |s| {
            let (row, col) = (s / self.grid_cols, s % self.grid_cols);
            self.tensor_at(frame, row, col).map(|t| (t, row, col))
        })
    }

    /// Assembles one frame. Unfilled slots carry quantized zeros.
    pub fn build_frame(&self, frame: usize, tensors: &[TokenTensor], map: &TileMap) -> Frame {
        let (w, h) = (self.frame_width(), self.frame_height());
        let mut out = Frame::blank(w, h);
        let ch = map.channels();
        for (t, row, col) in self.tiles_in_frame(frame) {
            let src = &tensors[t].0;
            let origin = row * self.tile_h * w + col * self.tile_w;
            for (p, plane) in out.planes.iter_mut().enumerate() {
                for (c, &cell) in map.cells().iter().enumerate() {
                    let cell = cell as usize;
                    let (r, k) = (cell / self.tile_w, cell % self.tile_w);
                    plane[origin + r * w + k] = to_sample(src[p * ch + c]);
                }
            }
        }
        out
    }

    /// Extracts one tensor from a decoded frame.
    pub fn extract_tensor(&self, frame: &Frame, row: usize, col: usize, map: &TileMap) -> TokenTensor {
        let w = frame.width;
        let ch = map.channels();
        let origin = row * self.tile_h * w + col * self.tile_w;
        let mut out = vec![0i8; 3 * ch];
        for (p, plane) in frame.planes.iter().enumerate() {
            for (c, &cell) in map.cells().iter().enumerate() {
                let cell = cell as usize;
                let (r, k) = (cell / self.tile_w, cell % self.tile_w);
                out[p * ch + c] = from_sample(plane[origin + r * w + k]);
            }
        }
        TokenTensor(out)
    }

    /// Builds every frame of the plan.
    pub fn build_frames(&self, tensors: &[TokenTensor], map: &TileMap) -> Result<Vec<Frame>> {
        if tensors.len() != self.tensors {
            return Err(Error::invalid(format!(
                "plan expects {} tensors, got {}",
                self.tensors,
                tensors.len()
            )));
        }
        Ok((0..self.frames).map(|f| self.build_frame(f, tensors, map)).collect())
    }
}
