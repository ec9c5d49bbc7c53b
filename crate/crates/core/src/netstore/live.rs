//! Real-socket fetch pipeline: the next transfer overlaps decode and restore of
//! earlier chunks on a pool of decoder threads.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::Serialize;

use super::client::{fetch_chunk, FetchedChunk, DEFAULT_TIMEOUT};
use crate::codec::{restore_slab, Bitstream, CodecConfig, ContainerHeader};
use crate::error::{Error, Result};
use crate::fetchsim::{
    estimate_bandwidth, pick_min_bubble, score_candidates, BandwidthTrace, ChunkRecord, ChunkSizes, FetchPolicy,
    FetchTimeline, LookupTable, Segment, TransferRecord,
};
use crate::kv::QuantizedKv;
use crate::layout::ResolutionClass;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ChunkRef {
    pub cache_id: [u8; 16],
    pub chunk_index: u32,
}

#[derive(Debug, Clone, Copy)]
pub struct LiveConfig {
    pub prior_gbps: f64,
    pub timeout: Duration,
    pub codec: CodecConfig,
}

impl Default for LiveConfig {
    fn default() -> Self {
        LiveConfig {
            prior_gbps: 10.0,
            timeout: DEFAULT_TIMEOUT,
            codec: CodecConfig::default(),
        }
    }
}

#[derive(Debug)]
pub struct LiveFetch {
    pub timeline: FetchTimeline,
    /// Restored slabs in request order, one per completed chunk.
    pub slabs: Vec<(ContainerHeader, QuantizedKv)>,
    /// Set when a network error cut the run short.
    pub aborted: Option<String>,
}

struct Job {
    pos: usize,
    fetched: FetchedChunk,
}

struct Done {
    pos: usize,
    decode_start: f64,
    decode_end: f64,
    slab: Result<QuantizedKv>,
}

struct Pending {
    resolution: ResolutionClass,
    bytes: u64,
    est_gbps: f64,
    select_load: usize,
    transfer_start: f64,
    transfer_end: f64,
    penalty: f64,
    frame_bytes: Option<u64>,
    header: ContainerHeader,
}

fn choose(
    policy: FetchPolicy,
    est: f64,
    load: usize,
    active: Option<ResolutionClass>,
    table: &LookupTable,
    last: Option<&ContainerHeader>,
) -> Result<ResolutionClass> {
    if let FetchPolicy::Fixed(r) = policy {
        return Ok(r);
    }
    // Entry sizes of the previous chunk stand in for this one's.
    let sizes: Vec<(ResolutionClass, f64)> = match last {
        Some(h) => h.entries.iter().map(|e| (e.class, e.length as f64 / 1e6)).collect(),
        None => table
            .resolutions()
            .into_iter()
            .map(|r| Ok((r, table.size_mb(r)?)))
            .collect::<Result<_>>()?,
    };
    let scored = score_candidates(est, load, active, table, &sizes)?;
    Ok(pick_min_bubble(&scored).ok_or_else(|| Error::invalid("no candidate resolutions"))?.resolution)
}

/// Fetches `chunks` in order, choosing each resolution from measured bandwidth.
pub fn live_fetch_pipeline(
    addr: &str,
    chunks: &[ChunkRef],
    table: &LookupTable,
    policy: FetchPolicy,
    cfg: &LiveConfig,
) -> Result<LiveFetch> {
    table.validate()?;
    let t0 = Instant::now();
    let busy = Arc::new(AtomicUsize::new(0));
    let (job_tx, job_rx) = mpsc::channel::<Job>();
    let job_rx = Arc::new(Mutex::new(job_rx));
    let (done_tx, done_rx) = mpsc::channel::<Done>();
    let workers: Vec<_> = (0..table.pool_size)
        .map(|_| {
            let (rx, tx, busy, codec) = (job_rx.clone(), done_tx.clone(), busy.clone(), cfg.codec);
            std::thread::spawn(move || loop {
                let job = match rx.lock().expect("job queue").recv() {
                    Ok(j) => j,
                    Err(_) => return,
                };
                busy.fetch_add(1, Ordering::SeqCst);
                let decode_start = t0.elapsed().as_secs_f64();
                let f = &job.fetched;
                let slab = f.header.plan(f.resolution).and_then(|plan| {
                    let bs = Bitstream::from_bytes(f.payload.clone())?;
                    restore_slab(&bs, &plan, &f.header, &codec)
                });
                let decode_end = t0.elapsed().as_secs_f64();
                busy.fetch_sub(1, Ordering::SeqCst);
                if tx.send(Done { pos: job.pos, decode_start, decode_end, slab }).is_err() {
                    return;
                }
            })
        })
        .collect();
    drop(done_tx);

    let mut history: Vec<TransferRecord> = Vec::new();
    let mut pending: Vec<Pending> = Vec::new();
    let mut active: Option<ResolutionClass> = None;
    let mut aborted = None;
    for (pos, c) in chunks.iter().enumerate() {
        let est = estimate_bandwidth(&history, Some(cfg.prior_gbps))?;
        let load = (busy.load(Ordering::SeqCst) + 1).min(table.pool_size);
        let r = choose(policy, est, load, active, table, pending.last().map(|p| &p.header))?;
        let transfer_start = t0.elapsed().as_secs_f64();
        let fetched = match fetch_chunk(addr, c.cache_id, c.chunk_index, r, cfg.timeout) {
            Ok(f) => f,
            Err(e @ (Error::Io(_) | Error::Timeout(_) | Error::Protocol(_))) => {
                aborted = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        let transfer_end = t0.elapsed().as_secs_f64();
        history.push(TransferRecord {
            bytes: fetched.payload.len() as u64,
            duration_s: fetched.tau_trans_s.max(1e-9),
        });
        let penalty = match active {
            Some(a) if a != r => table.penalty(r)?,
            _ => 0.0,
        };
        active = Some(r);
        let sizes = ChunkSizes::from_header(&fetched.header)?;
        pending.push(Pending {
            resolution: r,
            bytes: fetched.payload.len() as u64,
            est_gbps: est,
            select_load: load,
            transfer_start,
            transfer_end,
            penalty,
            frame_bytes: sizes.entry(r).and_then(|e| e.frame_bytes),
            header: fetched.header.clone(),
        });
        job_tx.send(Job { pos, fetched }).map_err(|_| Error::InvalidState("decoder pool exited".into()))?;
    }
    drop(job_tx);
    let mut done: Vec<Done> = done_rx.iter().collect();
    for w in workers {
        let _ = w.join();
    }
    done.sort_by_key(|d| d.pos);
    if done.len() != pending.len() {
        return Err(Error::InvalidState("a decoder thread died".into()));
    }

    let mut records = Vec::with_capacity(done.len());
    let mut slabs = Vec::with_capacity(done.len());
    let mut intervals = Vec::with_capacity(done.len());
    let mut last_end: Option<f64> = None;
    for (p, d) in pending.into_iter().zip(done) {
        let slab = d.slab?;
        let bubble = last_end.map_or(0.0, |l| (p.transfer_end - l).max(0.0));
        last_end = Some(last_end.map_or(d.decode_end, |l| l.max(d.decode_end)));
        let live = (cfg.codec.reference_depth as u64 + 1) * p.frame_bytes.unwrap_or(0);
        intervals.push((d.decode_start, d.decode_end, live));
        records.push(ChunkRecord {
            chunk: d.pos,
            resolution: p.resolution,
            bytes: p.bytes,
            est_gbps: p.est_gbps,
            select_load: p.select_load,
            transfer_start: p.transfer_start,
            transfer_end: p.transfer_end,
            tau_trans: p.transfer_end - p.transfer_start,
            decode_start: d.decode_start,
            decode_end: d.decode_end,
            decode_load: p.select_load,
            tau_dec: d.decode_end - d.decode_start,
            penalty_applied: p.penalty > 0.0,
            tau_penalty: p.penalty,
            bubble,
        });
        slabs.push((p.header, slab));
    }
    let timeline = FetchTimeline {
        policy,
        ttft_s: last_end.unwrap_or(0.0),
        total_bubble_s: records.iter().map(|r| r.bubble).sum(),
        peak_restore_bytes: crate::fetchsim::sim::peak_restore_bytes(&intervals),
        records,
    };
    Ok(LiveFetch { timeline, slabs, aborted })
}

/// Piecewise-constant trace of the rates each transfer actually achieved.
pub fn measured_trace(timeline: &FetchTimeline) -> Result<BandwidthTrace> {
    let mut segs: Vec<Segment> = Vec::new();
    for r in &timeline.records {
        let gbps = r.bytes as f64 * 8.0 / r.tau_trans.max(1e-9) / 1e9;
        let start_s = if segs.is_empty() { 0.0 } else { r.transfer_start };
        if segs.last().is_some_and(|s| start_s <= s.start_s) {
            continue;
        }
        segs.push(Segment { start_s, gbps });
    }
    if segs.is_empty() {
        return Err(Error::invalid("timeline has no transfers"));
    }
    BandwidthTrace::new(segs)
}
