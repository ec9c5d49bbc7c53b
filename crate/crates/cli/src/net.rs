//! Chunk server and client commands.

use std::io::Write;
use std::path::PathBuf;
use std::time::Duration;

use clap::Args;
use kvfetch_core::codec::{cache_id_hex, parse_cache_id, restore_slab, Bitstream, CodecConfig};
use kvfetch_core::fetchsim::FetchPolicy;
use kvfetch_core::layout::ResolutionClass;
use kvfetch_core::netstore::{
    fetch_chunk, live_fetch_pipeline, serve as serve_store, ChunkRef, ChunkStore, LiveConfig, ADDR_ENV, DEFAULT_ADDR,
    RATE_ENV,
};
use kvfetch_core::{Error, Result};
use serde_json::{json, Value};

use crate::report::{sha256_hex, InputDigest, ReportBundle};
use crate::sim::load_table;
use crate::Ctx;

#[derive(Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, env = ADDR_ENV, default_value = DEFAULT_ADDR)]
    pub addr: String,
    /// Outgoing rate limit; unlimited when absent.
    #[arg(long, env = RATE_ENV)]
    pub rate_gbps: Option<f64>,
    /// Stop after this many seconds instead of running until killed.
    #[arg(long)]
    pub duration_s: Option<f64>,
}

pub fn serve(a: &ServeArgs) -> Result<()> {
    let store = ChunkStore::open(&a.store)?;
    let chunks = store.len();
    let handle = serve_store(store, a.addr.as_str(), a.rate_gbps)?;
    println!("listening on {} ({chunks} chunks)", handle.local_addr());
    std::io::stdout().flush()?;
    match a.duration_s {
        Some(s) if s.is_finite() && s >= 0.0 => {
            std::thread::sleep(Duration::from_secs_f64(s));
            handle.shutdown();
        }
        Some(s) => return Err(Error::InvalidArgument(format!("bad --duration-s {s}"))),
        None => handle.wait(),
    }
    Ok(())
}

#[derive(Args)]
pub struct FetchArgs {
    #[arg(long, env = ADDR_ENV, default_value = DEFAULT_ADDR)]
    pub addr: String,
    #[arg(long)]
    pub cache_id: String,
    /// Chunk indices in fetch order.
    #[arg(long, value_delimiter = ',', required = true)]
    pub chunks: Vec<u32>,
    /// Resolution requested for every chunk unless --live is set.
    #[arg(long, default_value = "R1080")]
    pub resolution: ResolutionClass,
    /// Run the adaptive pipeline: pick resolutions from measured bandwidth and decode concurrently.
    #[arg(long)]
    pub live: bool,
    #[arg(long, default_value = "h20")]
    pub table: String,
    #[arg(long, default_value = "adaptive")]
    pub policy: FetchPolicy,
    #[arg(long, default_value_t = 10.0)]
    pub prior_gbps: f64,
    #[arg(long, default_value_t = 30.0)]
    pub timeout_s: f64,
}

fn slab_digest(values: &[i8]) -> String {
    sha256_hex(&values.iter().map(|&x| x as u8).collect::<Vec<_>>())
}

/// Emits its own report so a partial live run is still written before the error.
pub fn fetch(a: &FetchArgs, ctx: &Ctx) -> Result<()> {
    if !(a.timeout_s.is_finite() && a.timeout_s > 0.0) {
        return Err(Error::InvalidArgument("--timeout-s must be positive".into()));
    }
    let timeout = Duration::from_secs_f64(a.timeout_s);
    let cache_id = parse_cache_id(&a.cache_id)?;
    let mut d = InputDigest::new("fetch", ctx.seed);
    d.param("cache_id", cache_id_hex(&cache_id))
        .param("chunks", format!("{:?}", a.chunks))
        .param("live", a.live);
    let mut report = ReportBundle::new("fetch", d.finish());
    let codec = CodecConfig::default();

    if !a.live {
        let mut total_bytes = 0u64;
        let mut total_s = 0.0;
        for &chunk in &a.chunks {
            let f = fetch_chunk(a.addr.as_str(), cache_id, chunk, a.resolution, timeout)?;
            let slab = restore_slab(
                &Bitstream::from_bytes(f.payload.clone())?,
                &f.header.plan(f.resolution)?,
                &f.header,
                &codec,
            )?;
            total_bytes += f.payload.len() as u64;
            total_s += f.tau_trans_s;
            report.push_row(&json!({
                "chunk": chunk,
                "resolution": f.resolution,
                "bytes": f.payload.len(),
                "tau_trans_s": f.tau_trans_s,
                "gbps": f.payload.len() as f64 * 8.0 / 1e9 / f.tau_trans_s.max(1e-9),
                "values_sha256": slab_digest(slab.values()),
            }))?;
        }
        let report = report.summary(&json!({
            "chunks": a.chunks.len(),
            "bytes": total_bytes,
            "transfer_s": total_s,
        }))?;
        return ctx.emit(&report);
    }

    let refs: Vec<ChunkRef> = a.chunks.iter().map(|&chunk_index| ChunkRef { cache_id, chunk_index }).collect();
    let cfg = LiveConfig {
        prior_gbps: a.prior_gbps,
        timeout,
        codec,
    };
    let live = live_fetch_pipeline(&a.addr, &refs, &load_table(&a.table)?, a.policy, &cfg)?;
    for (rec, (_, slab)) in live.timeline.records.iter().zip(&live.slabs) {
        let mut row = serde_json::to_value(rec)?;
        row["chunk"] = json!(a.chunks[rec.chunk]);
        row["values_sha256"] = Value::String(slab_digest(slab.values()));
        report.rows.push(row);
    }
    let report = report.summary(&json!({
        "policy": a.policy.to_string(),
        "requested": a.chunks.len(),
        "restored": live.slabs.len(),
        "ttft_s": live.timeline.ttft_s,
        "total_bubble_s": live.timeline.total_bubble_s,
        "resolutions": live.timeline.resolutions(),
        "aborted": live.aborted,
    }))?;
    ctx.emit(&report)?;
    match live.aborted {
        Some(msg) => Err(Error::Io(std::io::Error::other(msg))),
        None => Ok(()),
    }
}
