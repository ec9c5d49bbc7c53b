//! Transmission / decode pipeline model with per-chunk resolution selection.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::table::{BandwidthTrace, LookupTable, MB_PER_S_PER_GBPS};
use crate::codec::ContainerHeader;
use crate::error::{Error, Result};
use crate::layout::ResolutionClass;

/// One completed transfer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub bytes: u64,
    pub duration_s: f64,
}

/// Bandwidth of the most recent transfer in Gbps, or `prior_gbps` before any transfer.
pub fn estimate_bandwidth(history: &[TransferRecord], prior_gbps: Option<f64>) -> Result<f64> {
    match history.last() {
        Some(last) if last.duration_s > 0.0 => Ok(last.bytes as f64 * 8.0 / last.duration_s / 1e9),
        Some(_) => Err(Error::InvalidState("last transfer has a non-positive duration".into())),
        None => prior_gbps.ok_or_else(|| Error::InvalidState("no transfer history and no prior bandwidth".into())),
    }
}

/// Bubble estimate of one candidate resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Candidate {
    pub resolution: ResolutionClass,
    pub tau_trans: f64,
    pub tau_dec: f64,
    pub tau_penalty: f64,
    pub bubble: f64,
}

/// Scores every candidate `(resolution, size in MB)`; the penalty applies when the
/// candidate differs from the active resolution.
pub fn score_candidates(
    bandwidth_gbps: f64,
    load: usize,
    active: Option<ResolutionClass>,
    table: &LookupTable,
    sizes_mb: &[(ResolutionClass, f64)],
) -> Result<Vec<Candidate>> {
    if !(bandwidth_gbps.is_finite() && bandwidth_gbps > 0.0) {
        return Err(Error::invalid(format!("bandwidth must be positive, got {bandwidth_gbps}")));
    }
    if load == 0 || load > table.pool_size {
        return Err(Error::invalid(format!("pool load {load} outside 1..={}", table.pool_size)));
    }
    sizes_mb
        .iter()
        .map(|&(r, size)| {
            let tau_trans = size / (bandwidth_gbps * MB_PER_S_PER_GBPS);
            let tau_dec = table.latency(r, load)?;
            let tau_penalty = match active {
                Some(a) if a != r => table.penalty(r)?,
                _ => 0.0,
            };
            Ok(Candidate {
                resolution: r,
                tau_trans,
                tau_dec,
                tau_penalty,
                bubble: (tau_trans - tau_dec - tau_penalty).abs(),
            })
        })
        .collect()
}

/// Minimum-bubble candidate; equal bubbles resolve to the higher resolution.
pub fn pick_min_bubble(candidates: &[Candidate]) -> Option<&Candidate> {
    let mut order: Vec<&Candidate> = candidates.iter().collect();
    order.sort_by(|a, b| b.resolution.cmp(&a.resolution));
    let mut best: Option<&Candidate> = None;
    for c in order {
        if best.is_none_or(|b| c.bubble < b.bubble) {
            best = Some(c);
        }
    }
    best
}

/// Picks the resolution whose transfer time best matches its decode time.
pub fn select_resolution(
    bandwidth_gbps: f64,
    load: usize,
    active: Option<ResolutionClass>,
    table: &LookupTable,
) -> Result<ResolutionClass> {
    let sizes = ResolutionClass::ALL
        .iter()
        .map(|&r| Ok((r, table.size_mb(r)?)))
        .collect::<Result<Vec<_>>>()?;
    let scored = score_candidates(bandwidth_gbps, load, active, table, &sizes)?;
    Ok(pick_min_bubble(&scored).expect("four candidates").resolution)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FetchPolicy {
    Adaptive,
    Fixed(ResolutionClass),
}

impl fmt::Display for FetchPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FetchPolicy::Adaptive => f.write_str("adaptive"),
            FetchPolicy::Fixed(r) => write!(f, "fixed-{r}"),
        }
    }
}

impl FromStr for FetchPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("adaptive") {
            return Ok(FetchPolicy::Adaptive);
        }
        let r = s
            .strip_prefix("fixed-")
            .or_else(|| s.strip_prefix("fixed:"))
            .or_else(|| s.strip_prefix("fixed="))
            .unwrap_or(s);
        r.parse().map(FetchPolicy::Fixed)
    }
}

/// Sizes of one chunk's resolution entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkSizes {
    pub chunk: usize,
    pub sizes: Vec<ChunkEntrySize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChunkEntrySize {
    pub resolution: ResolutionClass,
    pub bytes: u64,
    /// Bytes of one decoded frame, when known.
    pub frame_bytes: Option<u64>,
}

impl ChunkSizes {
    /// `n` chunks whose sizes are the table's nominal sizes.
    pub fn from_table(table: &LookupTable, n: usize) -> Vec<ChunkSizes> {
        (0..n)
            .map(|chunk| ChunkSizes {
                chunk,
                sizes: table
                    .rows
                    .iter()
                    .map(|(&resolution, row)| ChunkEntrySize {
                        resolution,
                        bytes: (row.size_mb * 1e6).round() as u64,
                        frame_bytes: None,
                    })
                    .collect(),
            })
            .collect()
    }

    pub fn from_header(h: &ContainerHeader) -> Result<ChunkSizes> {
        let sizes = h
            .entries
            .iter()
            .map(|e| {
                Ok(ChunkEntrySize {
                    resolution: e.class,
                    bytes: e.length,
                    frame_bytes: Some(h.plan(e.class)?.frame_bytes() as u64),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ChunkSizes {
            chunk: h.chunk_index as usize,
            sizes,
        })
    }

    pub fn entry(&self, r: ResolutionClass) -> Option<&ChunkEntrySize> {
        self.sizes.iter().find(|e| e.resolution == r)
    }

    fn sizes_mb(&self) -> Vec<(ResolutionClass, f64)> {
        self.sizes.iter().map(|e| (e.resolution, e.bytes as f64 / 1e6)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Bandwidth assumed before the first transfer completes.
    pub prior_gbps: f64,
    /// Constant cost after the last decode (dequantize and final page writes).
    pub epilogue_s: f64,
    pub reference_depth: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            prior_gbps: 10.0,
            epilogue_s: 0.0,
            reference_depth: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkRecord {
    pub chunk: usize,
    pub resolution: ResolutionClass,
    pub bytes: u64,
    pub est_gbps: f64,
    /// Pool load used for selection.
    pub select_load: usize,
    pub transfer_start: f64,
    pub transfer_end: f64,
    pub tau_trans: f64,
    pub decode_start: f64,
    pub decode_end: f64,
    pub decode_load: usize,
    pub tau_dec: f64,
    pub penalty_applied: bool,
    pub tau_penalty: f64,
    /// Pool idle time spent waiting for this chunk's transfer.
    pub bubble: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FetchTimeline {
    pub policy: FetchPolicy,
    pub records: Vec<ChunkRecord>,
    pub ttft_s: f64,
    pub total_bubble_s: f64,
    pub peak_restore_bytes: u64,
}

pub const TIMELINE_CSV_HEADER: &str = "chunk,resolution,bytes,est_gbps,select_load,transfer_start,transfer_end,tau_trans,decode_start,decode_end,decode_load,tau_dec,penalty_applied,tau_penalty,bubble";

impl FetchTimeline {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(TIMELINE_CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{:.6},{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{:.6},{},{:.6},{:.6}\n",
                r.chunk,
                r.resolution,
                r.bytes,
                r.est_gbps,
                r.select_load,
                r.transfer_start,
                r.transfer_end,
                r.tau_trans,
                r.decode_start,
                r.decode_end,
                r.decode_load,
                r.tau_dec,
                r.penalty_applied,
                r.tau_penalty,
                r.bubble
            ));
        }
        out
    }

    pub fn resolutions(&self) -> Vec<ResolutionClass> {
        self.records.iter().map(|r| r.resolution).collect()
    }
}

/// Decode pool state shared by the simulator and the live pipeline.
#[derive(Debug, Clone)]
pub(crate) struct PoolModel {
    free_at: Vec<f64>,
    pub(crate) active: Option<ResolutionClass>,
    last_decode_end: Option<f64>,
}

impl PoolModel {
    pub(crate) fn new(pool_size: usize) -> Self {
        PoolModel {
            free_at: vec![0.0; pool_size],
            active: None,
            last_decode_end: None,
        }
    }

    /// Decoders still busy at `t`, plus the one a new chunk would occupy.
    pub(crate) fn load_at(&self, t: f64) -> usize {
        (self.free_at.iter().filter(|&&f| f > t).count() + 1).min(self.free_at.len())
    }

    /// Schedules a decode whose input is ready at `ready`. Returns
    /// `(start, end, load, tau_dec, penalty, bubble)`.
    pub(crate) fn dispatch(
        &mut self,
        ready: f64,
        r: ResolutionClass,
        table: &LookupTable,
    ) -> Result<(f64, f64, usize, f64, f64, f64)> {
        let k = (0..self.free_at.len())
            .min_by(|&a, &b| self.free_at[a].total_cmp(&self.free_at[b]))
            .expect("non-empty pool");
        let start = ready.max(self.free_at[k]);
        let load = self.load_at(start);
        let tau_dec = table.latency(r, load)?;
        let penalty = match self.active {
            Some(a) if a != r => table.penalty(r)?,
            _ => 0.0,
        };
        let end = start + tau_dec + penalty;
        let bubble = self.last_decode_end.map_or(0.0, |last| (ready - last).max(0.0));
        self.free_at[k] = end;
        self.active = Some(r);
        self.last_decode_end = Some(self.last_decode_end.map_or(end, |l| l.max(end)));
        Ok((start, end, load, tau_dec, penalty, bubble))
    }
}

/// Most bytes held by overlapping decodes, each holding `(depth + 1)` frames.
pub(crate) fn peak_restore_bytes(intervals: &[(f64, f64, u64)]) -> u64 {
    let mut events: Vec<(f64, i64)> = Vec::with_capacity(2 * intervals.len());
    for &(s, e, b) in intervals {
        events.push((s, b as i64));
        events.push((e, -(b as i64)));
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let (mut cur, mut peak) = (0i64, 0i64);
    for (_, d) in events {
        cur += d;
        peak = peak.max(cur);
    }
    peak as u64
}

/// Serial link, `P`-way decode pool. The next transfer starts as soon as the link
/// frees; a decode starts once its transfer is done and a decoder is free.
pub fn simulate_fetch(
    chunks: &[ChunkSizes],
    trace: &BandwidthTrace,
    table: &LookupTable,
    policy: FetchPolicy,
    cfg: &SimConfig,
) -> Result<FetchTimeline> {
    if chunks.is_empty() {
        return Err(Error::invalid("no chunks to fetch"));
    }
    if let FetchPolicy::Fixed(r) = policy {
        if let Some(c) = chunks.iter().find(|c| c.entry(r).is_none()) {
            return Err(Error::invalid(format!("chunk {} has no {r} entry", c.chunk)));
        }
        table.row(r)?;
    }
    let mut pool = PoolModel::new(table.pool_size);
    let mut link_free = 0.0;
    let mut history: Vec<TransferRecord> = Vec::new();
    let mut records = Vec::with_capacity(chunks.len());
    let mut intervals = Vec::with_capacity(chunks.len());
    for c in chunks {
        let start = link_free;
        let est = estimate_bandwidth(&history, Some(cfg.prior_gbps))?;
        let select_load = pool.load_at(start);
        let r = match policy {
            FetchPolicy::Fixed(r) => r,
            FetchPolicy::Adaptive => {
                let scored = score_candidates(est, select_load, pool.active, table, &c.sizes_mb())?;
                pick_min_bubble(&scored)
                    .ok_or_else(|| Error::invalid(format!("chunk {} has no entries", c.chunk)))?
                    .resolution
            }
        };
        let entry = *c.entry(r).expect("selected from the chunk's entries");
        let end = trace.transfer_end(start, entry.bytes as f64);
        history.push(TransferRecord {
            bytes: entry.bytes,
            duration_s: end - start,
        });
        link_free = end;
        let (ds, de, load, tau_dec, penalty, bubble) = pool.dispatch(end, r, table)?;
        let live = (cfg.reference_depth as u64 + 1) * entry.frame_bytes.unwrap_or(0);
        intervals.push((ds, de, live));
        records.push(ChunkRecord {
            chunk: c.chunk,
            resolution: r,
            bytes: entry.bytes,
            est_gbps: est,
            select_load,
            transfer_start: start,
            transfer_end: end,
            tau_trans: end - start,
            decode_start: ds,
            decode_end: de,
            decode_load: load,
            tau_dec,
            penalty_applied: penalty > 0.0,
            tau_penalty: penalty,
            bubble,
        });
    }
    let last = records.iter().map(|r| r.decode_end).fold(0.0, f64::max);
    Ok(FetchTimeline {
        policy,
        total_bubble_s: records.iter().map(|r| r.bubble).sum(),
        ttft_s: last + cfg.epilogue_s,
        peak_restore_bytes: peak_restore_bytes(&intervals),
        records,
    })
}
