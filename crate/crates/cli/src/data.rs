//! Corpus, layout and container commands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use kvfetch_core::codec::{
    cache_id_hex, compression_ratio, pack_chunk, parse_cache_id, unpack_chunk, ChunkId, CodecConfig, CodecSizer,
    CompressionReport, PackOptions, CHUNK_TOKENS,
};
use kvfetch_core::kv::{quantize, KvShape, QuantizedKv, SyntheticSpec};
use kvfetch_core::layout::{dimension_similarity_report, search_intra_layout, LayoutConfig, ResolutionClass};
use kvfetch_core::netstore::{ChunkStore, StoredChunk};
use kvfetch_core::{Error, Result};
use serde::Serialize;
use serde_json::json;

use crate::corpus;
use crate::report::{sha256_hex, InputDigest, ReportBundle};
use crate::Ctx;

#[derive(Args)]
pub struct GenArgs {
    /// Corpus spec file; replaces the shape flags, --smoothness and --seed.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 1024)]
    pub tokens: usize,
    #[arg(long, default_value_t = 3)]
    pub layers: usize,
    #[arg(long, default_value_t = 8)]
    pub heads: usize,
    #[arg(long, default_value_t = 64)]
    pub head_dim: usize,
    /// One corpus per listed value.
    #[arg(long, value_delimiter = ',', default_value = "0.9")]
    pub smoothness: Vec<f32>,
    /// Corpora per smoothness value, seeded `seed, seed + 1, ...`.
    #[arg(long, default_value_t = 1)]
    pub count: u64,
    #[arg(long, default_value = "corpus")]
    pub name: String,
}

pub fn corpus_dir_name(name: &str, spec: &SyntheticSpec) -> String {
    format!("{name}-s{}-seed{}", spec.smoothness, spec.seed)
}

pub fn gen(a: &GenArgs, ctx: &Ctx) -> Result<ReportBundle> {
    let specs: Vec<SyntheticSpec> = match &a.spec {
        Some(p) => vec![serde_json::from_slice(&fs::read(p)?)?],
        None => {
            if a.count == 0 {
                return Err(Error::InvalidArgument("--count must be positive".into()));
            }
            let mut v = Vec::new();
            for &smoothness in &a.smoothness {
                for k in 0..a.count {
                    v.push(SyntheticSpec {
                        tokens: a.tokens,
                        layers: a.layers,
                        heads: a.heads,
                        head_dim: a.head_dim,
                        smoothness,
                        seed: ctx.seed + k,
                    });
                }
            }
            v
        }
    };
    let mut d = InputDigest::new("gen", ctx.seed);
    d.param("name", &a.name).bytes("specs", &serde_json::to_vec(&specs)?);
    let mut report = ReportBundle::new("gen", d.finish());
    for spec in &specs {
        let kv = spec.generate()?;
        let dir_name = corpus_dir_name(&a.name, spec);
        let manifest = corpus::write(&ctx.out_dir.join(&dir_name), spec, &kv)?;
        let m: corpus::Manifest = serde_json::from_slice(&manifest)?;
        report.push_row(&json!({
            "corpus": dir_name,
            "tokens": spec.tokens,
            "layers": spec.layers,
            "H": spec.heads,
            "D": spec.head_dim,
            "smoothness": spec.smoothness,
            "seed": spec.seed,
            "data_sha256": m.sha256,
            "manifest_sha256": sha256_hex(&manifest),
        }))?;
    }
    report.summary(&json!({ "corpora": specs.len() }))
}

fn default_group(shape: KvShape, group: Option<usize>) -> usize {
    group.unwrap_or(shape.head_dim)
}

#[derive(Args)]
pub struct SearchArgs {
    /// Corpus directories; comma separated or repeated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub corpus: Vec<PathBuf>,
    /// Quantization group size; defaults to D.
    #[arg(long)]
    pub group_size: Option<usize>,
    /// Resolution class used to size candidates.
    #[arg(long, default_value = "R240")]
    pub resolution: ResolutionClass,
}

pub const LAYOUT_FILE: &str = "layout.json";

pub fn search(a: &SearchArgs, ctx: &Ctx) -> Result<ReportBundle> {
    let mut d = InputDigest::new("search", ctx.seed);
    d.param("resolution", a.resolution);
    let mut qs = Vec::new();
    for dir in &a.corpus {
        let c = corpus::read(dir)?;
        let g = default_group(c.kv.shape(), a.group_size);
        d.param("corpus", &c.manifest.sha256).param("group", g);
        qs.push(quantize(&c.kv, g)?);
    }
    let sizer = CodecSizer {
        resolution: a.resolution,
        codec: CodecConfig::default(),
    };
    let found = search_intra_layout(&qs, &sizer)?;
    let mut report = ReportBundle::new("search", d.finish());
    for (i, c) in found.candidates.iter().enumerate() {
        let (a_h, b_h) = c.layout.head_split();
        let (a_d, b_d) = c.layout.dim_split();
        report.push_row(&json!({
            "index": i,
            "a_h": a_h, "b_h": b_h, "a_d": a_d, "b_d": b_d,
            "tile_h": c.layout.tile_h(),
            "tile_w": c.layout.tile_w(),
            "bytes": c.bytes,
            "chosen": c.layout == found.chosen,
            "identity": c.layout.head_split().0 == 1 && c.layout.dim_split().0 == 1,
        }))?;
    }
    fs::create_dir_all(&ctx.out_dir)?;
    fs::write(ctx.out_dir.join(LAYOUT_FILE), serde_json::to_vec_pretty(&found.chosen)?)?;
    report.summary(&json!({
        "candidates": found.candidates.len(),
        "chosen": found.chosen,
        "layout_file": LAYOUT_FILE,
    }))
}

#[derive(Args)]
pub struct PackArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Layout JSON as written by `search`; the identity layout when absent.
    #[arg(long)]
    pub layout: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "R240,R480,R640,R1080")]
    pub resolutions: Vec<ResolutionClass>,
    #[arg(long)]
    pub group_size: Option<usize>,
    #[arg(long, default_value_t = CHUNK_TOKENS)]
    pub chunk_tokens: usize,
    /// 32 hex digits; derived from the corpus digest when absent.
    #[arg(long)]
    pub cache_id: Option<String>,
    /// Store directory; `<out-dir>/store` when absent.
    #[arg(long)]
    pub store: Option<PathBuf>,
}

pub fn pack(a: &PackArgs, ctx: &Ctx) -> Result<ReportBundle> {
    if a.chunk_tokens == 0 {
        return Err(Error::InvalidArgument("--chunk-tokens must be positive".into()));
    }
    let c = corpus::read(&a.corpus)?;
    let shape = c.kv.shape();
    let layout = match &a.layout {
        Some(p) => serde_json::from_slice::<LayoutConfig>(&fs::read(p)?)?,
        None => LayoutConfig::identity(shape.heads, shape.head_dim)?,
    };
    let group = default_group(shape, a.group_size);
    let cache_id = match &a.cache_id {
        Some(s) => parse_cache_id(s)?,
        None => parse_cache_id(&c.manifest.sha256[..32])?,
    };
    let store = a.store.clone().unwrap_or_else(|| ctx.out_dir.join("store"));
    let mut d = InputDigest::new("pack", ctx.seed);
    d.param("corpus", &c.manifest.sha256)
        .bytes("layout", &serde_json::to_vec(&layout)?)
        .param("resolutions", format!("{:?}", a.resolutions))
        .param("group", group)
        .param("chunk_tokens", a.chunk_tokens)
        .param("cache_id", cache_id_hex(&cache_id));

    let q = quantize(&c.kv, group)?.padded_to_triplets();
    let triplets = q.layer_triplets();
    let opts = PackOptions {
        chunk_tokens: a.chunk_tokens,
        ..PackOptions::default()
    };
    let mut report = ReportBundle::new("pack", d.finish());
    let mut totals: BTreeMap<ResolutionClass, usize> = BTreeMap::new();
    let mut chunks = 0u32;
    for (tc, start) in (0..shape.tokens).step_by(a.chunk_tokens).enumerate() {
        let end = (start + a.chunk_tokens).min(shape.tokens);
        for triplet in 0..triplets {
            let chunk_index = u32::try_from(tc * triplets + triplet)
                .map_err(|_| Error::InvalidArgument("too many chunks".into()))?;
            let id = ChunkId {
                cache_id,
                chunk_index,
                token_start: start as u32,
                layer_triplet_index: u8::try_from(triplet)
                    .map_err(|_| Error::InvalidArgument("too many layer triplets".into()))?,
            };
            let container = pack_chunk(&q.slab(triplet, start..end)?, &layout, &a.resolutions, id, &opts)?;
            ChunkStore::write(&store, &container)?;
            for e in &container.header().entries {
                *totals.entry(e.class).or_default() += e.length as usize;
                report.push_row(&json!({
                    "chunk": chunk_index,
                    "token_start": start,
                    "token_count": end - start,
                    "triplet": triplet,
                    "resolution": e.class,
                    "bytes": e.length,
                }))?;
            }
            chunks += 1;
        }
    }
    let compression = totals
        .iter()
        .map(|(r, &b)| Ok((r.to_string(), compression_ratio(&c.kv, b)?)))
        .collect::<Result<BTreeMap<String, CompressionReport>>>()?;
    report.summary(&json!({
        "cache_id": cache_id_hex(&cache_id),
        "chunks": chunks,
        "layer_triplets": triplets,
        "group_size": group,
        "layout": layout,
        "compression": compression,
    }))
}

#[derive(Args)]
pub struct RestoreArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// Required when the store holds more than one cache.
    #[arg(long)]
    pub cache_id: Option<String>,
    /// Resolutions to decode; every stored entry when absent.
    #[arg(long, value_delimiter = ',')]
    pub resolutions: Vec<ResolutionClass>,
    /// Source corpus to compare against bit for bit.
    #[arg(long)]
    pub verify: Option<PathBuf>,
}

pub(crate) fn pick_cache(store: &ChunkStore, wanted: Option<&str>) -> Result<[u8; 16]> {
    if let Some(s) = wanted {
        return parse_cache_id(s);
    }
    let mut ids: Vec<[u8; 16]> = store.chunks().map(|c| c.header.cache_id).collect();
    ids.dedup();
    match ids.as_slice() {
        [] => Err(Error::NotFound(format!("no containers under {}", store.root().display()))),
        [one] => Ok(*one),
        _ => Err(Error::InvalidArgument("store holds several caches; pass --cache-id".into())),
    }
}

pub(crate) fn cache_chunks<'a>(store: &'a ChunkStore, id: &[u8; 16]) -> Result<Vec<&'a StoredChunk>> {
    let v: Vec<&StoredChunk> = store.chunks().filter(|c| &c.header.cache_id == id).collect();
    if v.is_empty() {
        return Err(Error::NotFound(format!("cache {} is not in the store", cache_id_hex(id))));
    }
    Ok(v)
}

#[derive(Serialize)]
struct RestoredMeta {
    tokens: usize,
    layers: usize,
    #[serde(rename = "H")]
    heads: usize,
    #[serde(rename = "D")]
    head_dim: usize,
    group_size: usize,
    values_file: &'static str,
    values_sha256: String,
    scales: Vec<f32>,
}

pub fn restore(a: &RestoreArgs, ctx: &Ctx) -> Result<ReportBundle> {
    let store = ChunkStore::open(&a.store)?;
    let id = pick_cache(&store, a.cache_id.as_deref())?;
    let chunks = cache_chunks(&store, &id)?;
    let first = &chunks[0].header;
    let layout = first.meta.layout;
    let group = first.meta.group_size;
    let tokens = chunks.iter().map(|c| (c.header.token_start + c.header.token_count) as usize).max().unwrap_or(0);
    let triplets = chunks.iter().map(|c| c.header.layer_triplet_index as usize + 1).max().unwrap_or(0);
    let shape = KvShape::new(tokens, 3 * triplets, layout.heads(), layout.head_dim())?;
    let groups = shape.channels() / group;
    let mut scales = vec![1.0f32; shape.layers * groups];
    for c in &chunks {
        let t = c.header.layer_triplet_index as usize;
        if c.header.meta.scales.len() != 3 * groups || c.header.meta.group_size != group {
            return Err(Error::Protocol(format!("chunk {} disagrees on quantization groups", c.header.chunk_index)));
        }
        scales[3 * t * groups..3 * (t + 1) * groups].copy_from_slice(&c.header.meta.scales);
    }
    let mut restored = QuantizedKv::new(shape, group, vec![0; shape.len()], scales)?;

    let source = match &a.verify {
        Some(dir) => Some(corpus::read(dir)?),
        None => None,
    };
    let mut d = InputDigest::new("restore", ctx.seed);
    d.param("cache_id", cache_id_hex(&id)).param("resolutions", format!("{:?}", a.resolutions));
    for c in &chunks {
        d.bytes("header", &c.header.to_bytes()?);
    }
    if let Some(s) = &source {
        d.param("verify", &s.manifest.sha256);
    }
    let mut report = ReportBundle::new("restore", d.finish());

    let codec = CodecConfig::default();
    let mut agree = true;
    let mut totals: BTreeMap<ResolutionClass, usize> = BTreeMap::new();
    for c in &chunks {
        let container = store.read_container(&id, c.header.chunk_index)?;
        let classes = if a.resolutions.is_empty() { c.header.resolutions() } else { a.resolutions.clone() };
        let mut reference: Option<QuantizedKv> = None;
        for r in classes {
            let slab = unpack_chunk(&container, r, &codec)?;
            let same = reference.as_ref().map_or(true, |q| *q == slab);
            agree &= same;
            let bytes = container.payload(r)?.len();
            *totals.entry(r).or_default() += bytes;
            report.push_row(&json!({
                "chunk": c.header.chunk_index,
                "resolution": r,
                "bytes": bytes,
                "matches_first_resolution": same,
                "values_sha256": sha256_hex(&i8_bytes(slab.values())),
            }))?;
            if reference.is_none() {
                reference = Some(slab);
            }
        }
        if let Some(slab) = reference {
            restored.set_slab(c.header.layer_triplet_index as usize, c.header.token_start as usize, &slab)?;
        }
    }

    let values = i8_bytes(restored.values());
    let meta = RestoredMeta {
        tokens: shape.tokens,
        layers: shape.layers,
        heads: shape.heads,
        head_dim: shape.head_dim,
        group_size: group,
        values_file: "restored.i8",
        values_sha256: sha256_hex(&values),
        scales: restored.scales().to_vec(),
    };
    let out = ctx.out_dir.join("restored");
    fs::create_dir_all(&out)?;
    fs::write(out.join(meta.values_file), &values)?;
    fs::write(out.join("restored.json"), serde_json::to_vec_pretty(&meta)?)?;

    let (bit_exact, compression) = match &source {
        Some(s) => {
            let src = quantize(&s.kv, group)?.padded_to_triplets();
            let exact = src == restored;
            let comp = totals
                .iter()
                .map(|(r, &b)| Ok((r.to_string(), compression_ratio(&s.kv, b)?)))
                .collect::<Result<BTreeMap<String, CompressionReport>>>()?;
            (Some(exact), comp)
        }
        None => {
            let n = shape.len();
            let comp = totals
                .iter()
                .map(|(r, &b)| {
                    (
                        r.to_string(),
                        CompressionReport {
                            fp16_bytes: 2 * n,
                            int8_bytes: n,
                            encoded_bytes: b,
                            ratio: (2 * n) as f64 / b as f64,
                            int8_ratio: n as f64 / b as f64,
                        },
                    )
                })
                .collect();
            (None, comp)
        }
    };
    report.summary(&json!({
        "cache_id": cache_id_hex(&id),
        "chunks": chunks.len(),
        "tokens": shape.tokens,
        "layers": shape.layers,
        "resolutions_agree": agree,
        "bit_exact": bit_exact,
        "values_sha256": meta.values_sha256,
        "compression": compression,
    }))
}

fn i8_bytes(v: &[i8]) -> Vec<u8> {
    v.iter().map(|&x| x as u8).collect()
}

#[derive(Args)]
pub struct SimilarityArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub group_size: Option<usize>,
}

pub fn similarity(a: &SimilarityArgs, ctx: &Ctx) -> Result<ReportBundle> {
    let c = corpus::read(&a.corpus)?;
    let group = default_group(c.kv.shape(), a.group_size);
    let mut d = InputDigest::new("similarity", ctx.seed);
    d.param("corpus", &c.manifest.sha256).param("group", group);
    let axes = dimension_similarity_report(&quantize(&c.kv, group)?)?;
    let mut report = ReportBundle::new("similarity", d.finish());
    for s in &axes {
        report.push_row(s)?;
    }
    let best = axes.iter().max_by(|x, y| x.mean_ssim.total_cmp(&y.mean_ssim)).map(|s| s.axis);
    report.summary(&json!({ "argmax_ssim_axis": best }))
}

#[derive(Args)]
pub struct ReproArgs {
    #[arg(long, default_value_t = 512)]
    pub tokens: usize,
    #[arg(long, default_value_t = 3)]
    pub layers: usize,
    #[arg(long, default_value_t = 8)]
    pub heads: usize,
    #[arg(long, default_value_t = 64)]
    pub head_dim: usize,
    #[arg(long, default_value_t = 0.9)]
    pub smoothness: f32,
}

pub fn repro(a: &ReproArgs, ctx: &Ctx) -> Result<ReportBundle> {
    let step = |r: &ReportBundle| -> Result<()> {
        r.write(&ctx.out_dir, ctx.format)?;
        Ok(())
    };
    let gen_args = GenArgs {
        spec: None,
        tokens: a.tokens,
        layers: a.layers,
        heads: a.heads,
        head_dim: a.head_dim,
        smoothness: vec![a.smoothness],
        count: 1,
        name: "corpus".into(),
    };
    let g = gen(&gen_args, ctx)?;
    step(&g)?;
    let dir = ctx.out_dir.join(g.rows[0]["corpus"].as_str().unwrap_or_default());

    let s = search(
        &SearchArgs {
            corpus: vec![dir.clone()],
            group_size: None,
            resolution: ResolutionClass::R240,
        },
        ctx,
    )?;
    step(&s)?;

    let store = ctx.out_dir.join("store");
    clear_store(&store)?;
    let p = pack(
        &PackArgs {
            corpus: dir.clone(),
            layout: Some(ctx.out_dir.join(LAYOUT_FILE)),
            resolutions: ResolutionClass::ALL.to_vec(),
            group_size: None,
            chunk_tokens: CHUNK_TOKENS,
            cache_id: None,
            store: Some(store.clone()),
        },
        ctx,
    )?;
    step(&p)?;

    let r = restore(
        &RestoreArgs {
            store,
            cache_id: None,
            resolutions: Vec::new(),
            verify: Some(dir),
        },
        ctx,
    )?;
    step(&r)?;

    let sim = crate::sim::simulate(&crate::sim::SimulateArgs::fixture(), ctx)?;
    step(&sim)?;

    let steps = [&g, &s, &p, &r, &sim];
    let mut d = InputDigest::new("repro", ctx.seed);
    for b in steps {
        d.param(&b.command, &b.input_digest);
    }
    let mut report = ReportBundle::new("repro", d.finish());
    let mut summary = serde_json::Map::new();
    for b in steps {
        report.push_row(&json!({
            "step": b.command,
            "input_digest": b.input_digest,
            "report": format!("{}.{}", b.command, ctx.format.ext()),
        }))?;
        summary.insert(b.command.clone(), b.summary.clone());
    }
    report.summary(&summary)
}

/// Removes containers left by an earlier run so the store holds one cache.
fn clear_store(dir: &Path) -> Result<()> {
    if !dir.exists() {
        return Ok(());
    }
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        if p.extension().is_some_and(|x| x == kvfetch_core::netstore::CONTAINER_EXT) {
            fs::remove_file(p)?;
        }
    }
    Ok(())
}
