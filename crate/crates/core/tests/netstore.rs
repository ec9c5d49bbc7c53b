use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use kvfetch_core::codec::{pack_chunk, restore_slab, Bitstream, ChunkContainer, ChunkId, CodecConfig, PackOptions};
use kvfetch_core::fetchsim::{simulate_fetch, ChunkSizes, FetchPolicy, LookupTable, SimConfig, TableRow};
use kvfetch_core::kv::{gen_synthetic_kv, quantize, KvShape, QuantizedKv};
use kvfetch_core::layout::{LayoutConfig, ResolutionClass};
use kvfetch_core::netstore::*;
use kvfetch_core::Error;

use ResolutionClass::*;

const CACHE: [u8; 16] = [0x5a; 16];
const TIMEOUT: Duration = Duration::from_secs(20);

fn slab(tokens: usize, seed: u64) -> QuantizedKv {
    let kv = gen_synthetic_kv(KvShape::new(tokens, 3, 8, 64).unwrap(), 0.95, seed).unwrap();
    quantize(&kv, 64).unwrap()
}

fn container(q: &QuantizedKv, chunk_index: u32) -> ChunkContainer {
    let layout = LayoutConfig::new(8, 64, (4, 2), (4, 16)).unwrap();
    let id = ChunkId { cache_id: CACHE, chunk_index, token_start: 0, layer_triplet_index: 0 };
    pack_chunk(q, &layout, &ResolutionClass::ALL, id, &PackOptions::default()).unwrap()
}

fn store_with(containers: &[ChunkContainer]) -> (tempfile::TempDir, ChunkStore) {
    let dir = tempfile::tempdir().unwrap();
    for c in containers {
        ChunkStore::write(dir.path(), c).unwrap();
    }
    let store = ChunkStore::open(dir.path()).unwrap();
    (dir, store)
}

#[test]
fn fetch_restores_every_resolution_bit_exactly() {
    let q = slab(2000, 1);
    let c = container(&q, 0);
    let (_dir, store) = store_with(std::slice::from_ref(&c));
    assert_eq!(store.len(), 1);
    let server = serve(store, "127.0.0.1:0", None).unwrap();
    let mut lengths = Vec::new();
    for r in ResolutionClass::ALL {
        let f = fetch_chunk(server.local_addr(), CACHE, 0, r, TIMEOUT).unwrap();
        assert_eq!(f.payload, c.payload(r).unwrap());
        assert_eq!(&f.header, c.header());
        assert!(f.tau_trans_s > 0.0);
        let bs = Bitstream::from_bytes(f.payload.clone()).unwrap();
        let restored = restore_slab(&bs, &f.header.plan(r).unwrap(), &f.header, &CodecConfig::default()).unwrap();
        assert_eq!(restored, q);
        lengths.push(f.payload.len());
    }
    // Smaller classes pack more consecutive tokens per slot and encode smaller.
    assert!(lengths.windows(2).all(|w| w[0] < w[1]), "{lengths:?}");
}

#[test]
fn errors_are_reported_distinctly() {
    let c = container(&slab(40, 2), 3);
    let (_dir, store) = store_with(&[c]);
    let server = serve(store, "127.0.0.1:0", None).unwrap();
    let addr = server.local_addr();
    assert!(matches!(fetch_chunk(addr, CACHE, 4, R240, TIMEOUT), Err(Error::NotFound(_))));
    assert!(matches!(fetch_chunk(addr, [0; 16], 3, R240, TIMEOUT), Err(Error::NotFound(_))));

    let mut bad = WireRequest { cache_id: CACHE, chunk_index: 3, resolution: R240 }.to_bytes();
    bad[..4].copy_from_slice(b"NOPE");
    let resp = send_raw(addr, &bad, TIMEOUT).unwrap();
    assert_eq!(resp.status, Status::ProtocolError);
    assert!(resp.payload.is_empty());

    let mut v2 = WireRequest { cache_id: CACHE, chunk_index: 3, resolution: R240 }.to_bytes();
    v2[4] = 9;
    assert_eq!(send_raw(addr, &v2, TIMEOUT).unwrap().status, Status::ProtocolError);

    drop(server);
    let dead = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let dead_addr = dead.local_addr().unwrap();
    drop(dead);
    assert!(matches!(fetch_chunk(dead_addr, CACHE, 3, R240, TIMEOUT), Err(Error::Io(_))));
}

#[test]
fn silent_server_times_out() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let hold = std::thread::spawn(move || {
        let (s, _) = listener.accept().unwrap();
        std::thread::sleep(Duration::from_millis(600));
        drop(s);
    });
    let err = fetch_chunk(addr, CACHE, 0, R240, Duration::from_millis(200)).unwrap_err();
    assert!(matches!(err, Error::Timeout(_)), "{err}");
    hold.join().unwrap();
}

#[test]
fn requests_in_any_order_return_identical_payloads() {
    let cs: Vec<_> = (0..3).map(|i| container(&slab(30, 10 + i as u64), i)).collect();
    let (_dir, store) = store_with(&cs);
    let server = serve(store, "127.0.0.1:0", None).unwrap();
    let mut seen = BTreeMap::new();
    for &(i, r) in &[(2u32, R480), (0, R1080), (1, R240), (2, R480), (0, R1080), (1, R240)] {
        let f = fetch_chunk(server.local_addr(), CACHE, i, r, TIMEOUT).unwrap();
        let prev = seen.insert((i, r), f.payload.clone());
        if let Some(p) = prev {
            assert_eq!(p, f.payload);
        }
        assert_eq!(f.payload, cs[i as usize].payload(r).unwrap());
    }
}

#[test]
fn rate_limit_paces_a_180_mb_payload() {
    let small = container(&slab(10, 3), 0);
    let mut header = small.header().clone();
    header.entries.clear();
    let big = ChunkContainer::build(header, vec![(R240, vec![0xa5; 180_000_000])]).unwrap();
    let (_dir, store) = store_with(&[big]);
    let server = serve(store, "127.0.0.1:0", Some(1.0)).unwrap();
    let t = Instant::now();
    let f = fetch_chunk(server.local_addr(), CACHE, 0, R240, Duration::from_secs(60)).unwrap();
    let dt = t.elapsed().as_secs_f64();
    assert_eq!(f.payload.len(), 180_000_000);
    // 180 MB at 125 MB/s is 1.44 s.
    assert!(dt >= 1.44 * 0.9 && dt <= 1.44 * 1.1, "{dt}");
    assert!(f.tau_trans_s >= 1.44 * 0.9);
}

#[test]
fn live_loopback_pipeline_restores_every_chunk() {
    let slabs: Vec<_> = (0..4).map(|i| slab(300, 20 + i)).collect();
    let cs: Vec<_> = slabs.iter().enumerate().map(|(i, q)| container(q, i as u32)).collect();
    let (_dir, store) = store_with(&cs);
    let server = serve(store, "127.0.0.1:0", None).unwrap();
    let refs: Vec<_> = (0..4).map(|i| ChunkRef { cache_id: CACHE, chunk_index: i }).collect();
    let addr = server.local_addr().to_string();
    let out = live_fetch_pipeline(&addr, &refs, &LookupTable::h20(), FetchPolicy::Adaptive, &LiveConfig::default())
        .unwrap();
    assert!(out.aborted.is_none());
    assert_eq!(out.timeline.records.len(), 4);
    for ((h, restored), q) in out.slabs.iter().zip(&slabs) {
        assert_eq!(restored, q, "chunk {}", h.chunk_index);
    }
    for w in out.timeline.records.windows(2) {
        assert!(w[1].transfer_start >= w[0].transfer_end);
    }
    for r in &out.timeline.records {
        assert!(r.decode_start >= r.transfer_end);
    }

    drop(server);
    let cut = live_fetch_pipeline(&addr, &refs, &LookupTable::h20(), FetchPolicy::Adaptive, &LiveConfig::default())
        .unwrap();
    assert!(cut.aborted.is_some());
    assert!(cut.timeline.records.is_empty());
}

/// Latencies that make each class's transfer time at `rates[class]` match its
/// decode time, so the adapter's choice tracks the link rate.
fn matched_table(c: &ChunkContainer, rates_gbps: [f64; 4]) -> LookupTable {
    let rows = ResolutionClass::ALL
        .iter()
        .zip(rates_gbps)
        .map(|(&r, g)| {
            let size_mb = c.header().entry(r).unwrap().length as f64 / 1e6;
            (r, TableRow { latency_s: vec![size_mb / (g * 125.0)], penalty_s: 0.0, size_mb })
        })
        .collect();
    let t = LookupTable { device: "loopback".into(), pool_size: 1, rows };
    t.validate().unwrap();
    t
}

#[test]
fn adaptive_switches_down_after_a_rate_step() {
    // The 6 -> 3 Gbps step scaled down 100x so payloads of about 1.4 MB take
    // 0.2 to 0.4 s on the paced link.
    let c = container(&slab(2000, 4), 0);
    let table = matched_table(&c, [0.03, 0.04, 0.05, 0.06]);
    let (_dir, store) = store_with(std::slice::from_ref(&c));
    let server = serve(store, "127.0.0.1:0", Some(0.06)).unwrap();
    let refs = vec![ChunkRef { cache_id: CACHE, chunk_index: 0 }; 8];
    let cfg = LiveConfig { prior_gbps: 0.06, ..LiveConfig::default() };
    let addr = server.local_addr().to_string();
    let rate = server.rate_limit().clone();
    let start = Instant::now();
    let step_at = 0.7;
    let stepper = std::thread::spawn(move || {
        std::thread::sleep(Duration::from_secs_f64(step_at));
        rate.set(Some(0.03)).unwrap();
    });
    let out = live_fetch_pipeline(&addr, &refs, &table, FetchPolicy::Adaptive, &cfg).unwrap();
    stepper.join().unwrap();
    let offset = start.elapsed().as_secs_f64() - out.timeline.records.last().unwrap().decode_end;
    assert!(offset >= 0.0);
    let recs = &out.timeline.records;
    let seq: Vec<_> = recs.iter().map(|r| r.resolution).collect();
    let before: Vec<_> = recs.iter().filter(|r| r.transfer_end < step_at - 0.02).collect();
    assert!(!before.is_empty());
    assert!(before.iter().all(|r| r.resolution == R1080), "{seq:?}");
    let k = recs.iter().position(|r| r.transfer_start > step_at + 0.02).expect("a transfer after the step");
    assert!(k + 1 < recs.len(), "{seq:?}");
    assert!(recs[k + 1].resolution < R1080, "{seq:?}");
    assert!(recs[k + 1..].iter().all(|r| r.resolution < R1080), "{seq:?}");
}

#[test]
fn measured_timeline_matches_simulation() {
    let c = container(&slab(2000, 5), 0);
    let (_dir, store) = store_with(std::slice::from_ref(&c));
    let server = serve(store, "127.0.0.1:0", Some(0.08)).unwrap();
    let refs = vec![ChunkRef { cache_id: CACHE, chunk_index: 0 }; 5];
    let addr = server.local_addr().to_string();
    let policy = FetchPolicy::Fixed(R1080);
    let out = live_fetch_pipeline(&addr, &refs, &LookupTable::h20(), policy, &LiveConfig::default()).unwrap();
    let recs = &out.timeline.records;
    // Same pool width as the live run, every load at the measured mean decode time.
    let pool = LookupTable::h20().pool_size;
    let mean_dec = recs.iter().map(|r| r.tau_dec).sum::<f64>() / recs.len() as f64;
    let rows = ResolutionClass::ALL
        .iter()
        .map(|&r| (r, TableRow { latency_s: vec![mean_dec; pool], penalty_s: 0.0, size_mb: 1.0 }))
        .collect();
    let table = LookupTable { device: "measured".into(), pool_size: pool, rows };
    let trace = measured_trace(&out.timeline).unwrap();
    let sizes: Vec<_> = (0..refs.len()).map(|_| ChunkSizes::from_header(c.header()).unwrap()).collect();
    let sim = simulate_fetch(&sizes, &trace, &table, policy, &SimConfig::default()).unwrap();
    let rel = (sim.ttft_s - out.timeline.ttft_s).abs() / out.timeline.ttft_s;
    assert!(rel < 0.2, "sim {} vs measured {}", sim.ttft_s, out.timeline.ttft_s);
}

#[test]
fn store_rejects_duplicate_chunks() {
    let c = container(&slab(20, 6), 0);
    let dir = tempfile::tempdir().unwrap();
    ChunkStore::write(dir.path(), &c).unwrap();
    std::fs::write(dir.path().join("copy.kvfc"), c.bytes()).unwrap();
    assert!(matches!(ChunkStore::open(dir.path()), Err(Error::Config(_))));
}
