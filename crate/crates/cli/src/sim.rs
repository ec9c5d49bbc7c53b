//! Fetch and scheduling simulations.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::Args;
use kvfetch_core::fetchsim::{
    simulate_fetch, BandwidthTrace, ChunkSizes, FetchPolicy, LookupTable, SimConfig, StepFixture,
};
use kvfetch_core::layout::ResolutionClass;
use kvfetch_core::netstore::ChunkStore;
use kvfetch_core::scheduler::{
    non_reuse_projection, read_trace_jsonl, run_trace, write_trace_jsonl, EngineModel, FetchEnv, SchedulerConfig,
    SchedulerMode, Sharing, TraceGenSpec, REUSE_THRESHOLD_TOKENS,
};
use kvfetch_core::{Error, Result};
use serde_json::{json, Value};

use crate::data::{cache_chunks, pick_cache};
use crate::report::{InputDigest, ReportBundle};
use crate::Ctx;

/// A bundled table name (h20, l20, a100) or a table JSON file.
pub fn load_table(s: &str) -> Result<LookupTable> {
    match LookupTable::builtin(s) {
        Some(t) => Ok(t),
        None if Path::new(s).exists() => LookupTable::load(Path::new(s)),
        None => Err(Error::InvalidArgument(format!("unknown table {s:?}"))),
    }
}

#[derive(Args)]
pub struct SimulateArgs {
    /// Use the bundled bandwidth-step scenario (table, trace, chunk count and prior).
    #[arg(long, conflicts_with_all = ["table", "trace", "gbps"])]
    pub fixture: bool,
    #[arg(long)]
    pub table: Option<String>,
    /// Bandwidth trace JSON: `[{"start_s": .., "gbps": ..}, ...]`.
    #[arg(long, conflicts_with = "gbps")]
    pub trace: Option<PathBuf>,
    /// Constant link rate.
    #[arg(long)]
    pub gbps: Option<f64>,
    #[arg(long, value_delimiter = ',', default_value = "adaptive,fixed-R1080")]
    pub policy: Vec<FetchPolicy>,
    /// Chunk count when sizes come from the table.
    #[arg(long, conflicts_with = "store")]
    pub chunks: Option<usize>,
    /// Take chunk sizes from a container store instead of the table.
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub cache_id: Option<String>,
    #[arg(long)]
    pub prior_gbps: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    pub epilogue_s: f64,
}

impl SimulateArgs {
    pub fn fixture() -> Self {
        SimulateArgs {
            fixture: true,
            table: None,
            trace: None,
            gbps: None,
            policy: vec![FetchPolicy::Adaptive, FetchPolicy::Fixed(ResolutionClass::R1080)],
            chunks: None,
            store: None,
            cache_id: None,
            prior_gbps: None,
            epilogue_s: 0.0,
        }
    }
}

pub fn simulate(a: &SimulateArgs, ctx: &Ctx) -> Result<ReportBundle> {
    let defaults = SimConfig::default();
    let (table, trace, default_chunks, prior) = if a.fixture {
        let f = StepFixture::bundled();
        (f.table, f.trace, f.chunks, f.prior_gbps)
    } else {
        let table = load_table(a.table.as_deref().unwrap_or("h20"))?;
        let trace = match (&a.trace, a.gbps) {
            (Some(p), _) => BandwidthTrace::load(p)?,
            (None, Some(g)) => BandwidthTrace::constant(g)?,
            (None, None) => {
                return Err(Error::InvalidArgument("pass --trace, --gbps or --fixture".into()));
            }
        };
        (table, trace, 10, defaults.prior_gbps)
    };
    let chunks = match &a.store {
        Some(dir) => {
            let store = ChunkStore::open(dir)?;
            let id = pick_cache(&store, a.cache_id.as_deref())?;
            cache_chunks(&store, &id)?
                .iter()
                .map(|c| ChunkSizes::from_header(&c.header))
                .collect::<Result<Vec<_>>>()?
        }
        None => ChunkSizes::from_table(&table, a.chunks.unwrap_or(default_chunks)),
    };
    let cfg = SimConfig {
        prior_gbps: a.prior_gbps.unwrap_or(prior),
        epilogue_s: a.epilogue_s,
        ..defaults
    };
    let mut d = InputDigest::new("simulate", ctx.seed);
    d.bytes("table", &serde_json::to_vec(&table)?)
        .bytes("trace", &serde_json::to_vec(&trace)?)
        .bytes("chunks", &serde_json::to_vec(&chunks)?)
        .param("policies", format!("{:?}", a.policy))
        .param("prior", cfg.prior_gbps)
        .param("epilogue", cfg.epilogue_s);
    let mut report = ReportBundle::new("simulate", d.finish());
    let mut per_policy = BTreeMap::new();
    let mut ttft: Vec<(FetchPolicy, f64)> = Vec::new();
    if !chunks.is_empty() {
        for &policy in &a.policy {
            let tl = simulate_fetch(&chunks, &trace, &table, policy, &cfg)?;
            for r in &tl.records {
                let mut row = serde_json::to_value(r)?;
                row["policy"] = Value::String(policy.to_string());
                report.rows.push(row);
            }
            ttft.push((policy, tl.ttft_s));
            per_policy.insert(
                policy.to_string(),
                json!({
                    "ttft_s": tl.ttft_s,
                    "total_bubble_s": tl.total_bubble_s,
                    "peak_restore_bytes": tl.peak_restore_bytes,
                    "resolutions": tl.resolutions(),
                }),
            );
        }
    }
    let find = |p: FetchPolicy| ttft.iter().find(|(q, _)| *q == p).map(|(_, t)| *t);
    let saving = match (find(FetchPolicy::Adaptive), find(FetchPolicy::Fixed(ResolutionClass::R1080))) {
        (Some(ad), Some(fx)) => Some(1.0 - ad / fx),
        _ => None,
    };
    report.summary(&json!({
        "device": table.device,
        "chunks": chunks.len(),
        "policies": per_policy,
        "adaptive_saving_vs_fixed_r1080": saving,
    }))
}

#[derive(Args)]
pub struct ScheduleArgs {
    /// Request trace, one JSON object per line.
    #[arg(long, conflicts_with = "generate")]
    pub trace: Option<PathBuf>,
    /// Generate this many synthetic requests from --seed instead.
    #[arg(long)]
    pub generate: Option<usize>,
    /// Mean arrivals per second of the synthetic trace.
    #[arg(long, default_value_t = 0.2)]
    pub rate: f64,
    #[arg(long, default_value_t = 1_000)]
    pub min_tokens: usize,
    #[arg(long, default_value_t = 100_000)]
    pub max_tokens: usize,
    #[arg(long, default_value_t = REUSE_THRESHOLD_TOKENS)]
    pub reuse_threshold: usize,
    /// Engine model JSON; defaults are used when absent.
    #[arg(long)]
    pub engine: Option<PathBuf>,
    #[arg(long)]
    pub capacity_tokens: Option<usize>,
    #[arg(long, default_value_t = SchedulerMode::FetchAware)]
    pub mode: SchedulerMode,
    #[arg(long)]
    pub no_early_admission: bool,
    #[arg(long, default_value = "h20")]
    pub table: String,
    /// Constant link rate for background fetches.
    #[arg(long, default_value_t = 10.0, conflicts_with = "bw_trace")]
    pub gbps: f64,
    #[arg(long)]
    pub bw_trace: Option<PathBuf>,
    #[arg(long, default_value = "adaptive")]
    pub fetch_policy: FetchPolicy,
    #[arg(long, default_value_t = Sharing::Even)]
    pub sharing: Sharing,
    /// Also replay the non-reuse requests alone and report the TTFT deviation.
    #[arg(long)]
    pub compare_projection: bool,
}

pub fn schedule(a: &ScheduleArgs, ctx: &Ctx) -> Result<ReportBundle> {
    let mut engine = match &a.engine {
        Some(p) => serde_json::from_slice::<EngineModel>(&fs::read(p)?)?,
        None => EngineModel::default(),
    };
    if a.capacity_tokens.is_some() {
        engine.capacity_tokens = a.capacity_tokens;
    }
    engine.validate()?;
    let trace = match (&a.trace, a.generate) {
        (Some(p), _) => read_trace_jsonl(BufReader::new(File::open(p)?))?,
        (None, Some(n)) => {
            let spec = TraceGenSpec {
                requests: n,
                rate_per_s: a.rate,
                min_tokens: a.min_tokens,
                max_tokens: a.max_tokens,
                reuse_threshold: a.reuse_threshold,
            };
            let t = spec.generate(&engine, ctx.seed)?;
            fs::create_dir_all(&ctx.out_dir)?;
            write_trace_jsonl(File::create(ctx.out_dir.join("trace.jsonl"))?, &t)?;
            t
        }
        (None, None) => return Err(Error::InvalidArgument("pass --trace or --generate".into())),
    };
    let bw = match &a.bw_trace {
        Some(p) => BandwidthTrace::load(p)?,
        None => BandwidthTrace::constant(a.gbps)?,
    };
    let env = FetchEnv::new(load_table(&a.table)?, bw, a.fetch_policy, a.sharing)?;
    let cfg = SchedulerConfig {
        mode: a.mode,
        early_admission: !a.no_early_admission,
    };
    let mut d = InputDigest::new("schedule", ctx.seed);
    let mut trace_bytes = Vec::new();
    write_trace_jsonl(&mut trace_bytes, &trace)?;
    d.bytes("trace", &trace_bytes)
        .bytes("engine", &serde_json::to_vec(&engine)?)
        .bytes("table", &serde_json::to_vec(&env.table)?)
        .bytes("bandwidth", &serde_json::to_vec(&env.trace)?)
        .param("policy", a.fetch_policy)
        .param("sharing", a.sharing)
        .param("mode", a.mode)
        .param("early", cfg.early_admission)
        .param("projection", a.compare_projection);

    let out = run_trace(&trace, &engine, Some(&env), cfg)?;
    let mut report = ReportBundle::new("schedule", d.finish());
    for r in &out.requests {
        report.push_row(r)?;
    }
    let mut summary = json!({
        "mode": out.mode,
        "quantum_s": out.quantum_s,
        "early_admission": cfg.early_admission,
        "sharing": a.sharing,
        "requests": out.requests.len(),
        "non_reuse": out.non_reuse,
        "reuse": out.reuse,
        "all": out.all,
    });
    if a.compare_projection {
        let proj = run_trace(&non_reuse_projection(&trace), &engine, None, cfg)?;
        let dev = proj
            .requests
            .iter()
            .filter_map(|p| Some((out.ttft(p.id)? - p.ttft_s?).abs()))
            .fold(0.0, f64::max);
        summary["projection"] = json!({
            "non_reuse": proj.non_reuse,
            "max_abs_deviation_s": dev,
        });
    }
    report.summary(&summary)
}
