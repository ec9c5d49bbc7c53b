//! Fetch pipeline model: bandwidth estimation, resolution selection against a decode
//! pool lookup table, timeline simulation, the layer-wise non-blocking condition and
//! frame-wise restoration.

pub mod pipeline;
pub mod restore;
pub mod sim;
pub mod table;

pub use pipeline::{check_nonblocking, PipelineCheck};
pub use restore::{restore_chunkwise, restore_stream, RestoreReport};
pub use sim::{
    estimate_bandwidth, pick_min_bubble, score_candidates, select_resolution, simulate_fetch, Candidate, ChunkEntrySize,
    ChunkRecord, ChunkSizes, FetchPolicy, FetchTimeline, SimConfig, TransferRecord, TIMELINE_CSV_HEADER,
};
pub use table::{BandwidthTrace, LookupTable, Segment, StepFixture, TableRow, MB_PER_S_PER_GBPS};
