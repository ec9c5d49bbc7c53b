//! Tensor-to-frame layout: token slicing, inter-frame placement, intra-frame tiling,
//! the tiling search and slice-similarity metrics.

pub mod metrics;
pub mod plan;
pub mod search;
pub mod tiling;

pub use metrics::{dimension_similarity_report, mse, psnr, ssim, Axis, AxisSimilarity, PSNR_CAP_DB};
pub use plan::{
    plan_inter_frame, plan_with_tiles, slice_tokens, unslice_tokens, Frame, FramePlan, Placement, PlaneRef,
    ResolutionClass, TokenTensor, MAX_FRAME_EXTENT,
};
pub use search::{search_intra_layout, CandidateSize, LayoutEncoder, SearchReport};
pub use tiling::{apply_layout, from_sample, inverse_layout, tiling_candidates, to_sample, LayoutConfig, Tile, TileMap};
