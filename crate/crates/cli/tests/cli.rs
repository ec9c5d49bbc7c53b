use std::fs;
use std::io::{BufRead, BufReader};
use std::net::TcpListener;
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

use serde_json::Value;

fn kvfetch(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvfetch"))
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .env_remove("KVFETCH_ADDR")
        .env_remove("KVFETCH_RATE_GBPS")
        .output()
        .expect("run kvfetch")
}

fn ok(out: &Path, args: &[&str]) -> Value {
    let o = kvfetch(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    let cmd = if args[0] == "--seed" { args[2] } else { args[0] };
    serde_json::from_slice(&fs::read(out.join(format!("{cmd}.json"))).unwrap()).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn small_corpus(out: &Path, smoothness: &str) -> String {
    let r = ok(out, &["gen", "--tokens", "96", "--heads", "4", "--head-dim", "16", "--smoothness", smoothness]);
    out.join(r["rows"][0]["corpus"].as_str().unwrap()).to_str().unwrap().to_string()
}

#[test]
fn gen_is_deterministic_and_sweeps() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["--seed", "7", "gen", "--tokens", "16", "--heads", "2", "--head-dim", "4", "--smoothness", "0.8,0.9,1"];
    let ra = kvfetch(a.path(), &args);
    let rb = kvfetch(b.path(), &args);
    assert!(ra.status.success() && rb.status.success());
    let ja = fs::read(a.path().join("gen.json")).unwrap();
    assert_eq!(ja, fs::read(b.path().join("gen.json")).unwrap());
    let v: Value = serde_json::from_slice(&ja).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 3);
    assert_eq!(v["schema_version"], 1);
    let other = kvfetch(b.path(), &["--seed", "8", "gen", "--tokens", "16", "--heads", "2", "--head-dim", "4"]);
    assert!(other.status.success());
    let w: Value = serde_json::from_slice(&fs::read(b.path().join("gen.json")).unwrap()).unwrap();
    assert_ne!(w["rows"][0]["data_sha256"], v["rows"][1]["data_sha256"]);
}

#[test]
fn gen_from_spec_file() {
    let d = tempfile::tempdir().unwrap();
    let spec = d.path().join("spec.json");
    fs::write(&spec, r#"{"tokens": 5, "layers": 2, "H": 2, "D": 2, "smoothness": 0.5, "seed": 11}"#).unwrap();
    let r = ok(d.path(), &["gen", "--spec", spec.to_str().unwrap()]);
    assert_eq!(r["rows"][0]["seed"], 11);
    assert_eq!(r["rows"][0]["layers"], 2);
}

#[test]
fn search_emits_every_candidate_and_is_stable() {
    let d = tempfile::tempdir().unwrap();
    let mut chosen = Vec::new();
    for seed in ["1", "2"] {
        let g = ok(d.path(), &["--seed", seed, "gen", "--tokens", "128", "--heads", "4", "--head-dim", "16"]);
        let corpus = d.path().join(g["rows"][0]["corpus"].as_str().unwrap());
        let s = ok(d.path(), &["search", "--corpus", corpus.to_str().unwrap()]);
        let rows = s["rows"].as_array().unwrap();
        // (log2 4 + 1) * (log2 16 + 1)
        assert_eq!(rows.len(), 15);
        assert_eq!(s["summary"]["candidates"], 15);
        assert!(rows.iter().any(|r| r["identity"] == true));
        assert_eq!(rows.iter().filter(|r| r["chosen"] == true).count(), 1);
        chosen.push(s["summary"]["chosen"].clone());
    }
    assert_eq!(chosen[0], chosen[1]);
}

#[test]
fn pack_restore_round_trip() {
    let d = tempfile::tempdir().unwrap();
    let corpus = small_corpus(d.path(), "0.9");
    let p = ok(d.path(), &["pack", "--corpus", &corpus, "--chunk-tokens", "40"]);
    // 3 token chunks x 1 triplet x 4 resolutions
    assert_eq!(p["summary"]["chunks"], 3);
    assert_eq!(p["rows"].as_array().unwrap().len(), 12);
    let store = d.path().join("store");
    let r = ok(d.path(), &["restore", "--store", store.to_str().unwrap(), "--verify", &corpus]);
    let s = &r["summary"];
    assert_eq!(s["bit_exact"], true);
    assert_eq!(s["resolutions_agree"], true);
    for class in ["R240", "R480", "R640", "R1080"] {
        let c = &s["compression"][class];
        assert_eq!(c["fp16_bytes"], 2 * 96 * 3 * 64);
        assert_eq!(c["int8_bytes"], 96 * 3 * 64);
        assert!(c["ratio"].as_f64().unwrap() > 0.0);
    }
    let values = fs::read(d.path().join("restored/restored.i8")).unwrap();
    assert_eq!(values.len(), 96 * 3 * 64);
}

#[test]
fn restore_detects_a_different_source() {
    let d = tempfile::tempdir().unwrap();
    let corpus = small_corpus(d.path(), "0.9");
    ok(d.path(), &["pack", "--corpus", &corpus, "--resolutions", "R240"]);
    let other = tempfile::tempdir().unwrap();
    let g = ok(other.path(), &["--seed", "5", "gen", "--tokens", "96", "--heads", "4", "--head-dim", "16"]);
    let src = other.path().join(g["rows"][0]["corpus"].as_str().unwrap());
    let store = d.path().join("store");
    let r = ok(d.path(), &["restore", "--store", store.to_str().unwrap(), "--verify", src.to_str().unwrap()]);
    assert_eq!(r["summary"]["bit_exact"], false);
}

#[test]
fn simulate_fixture_saving_and_determinism() {
    let a = tempfile::tempdir().unwrap();
    let r = ok(a.path(), &["simulate", "--fixture"]);
    let saving = r["summary"]["adaptive_saving_vs_fixed_r1080"].as_f64().unwrap();
    assert!((0.10..=0.30).contains(&saving), "{saving}");
    let first = fs::read(a.path().join("simulate.json")).unwrap();
    ok(a.path(), &["simulate", "--fixture"]);
    assert_eq!(first, fs::read(a.path().join("simulate.json")).unwrap());
    assert_eq!(r["rows"].as_array().unwrap().len(), 20);

    let o = kvfetch(a.path(), &["--format", "csv", "simulate", "--fixture"]);
    assert!(o.status.success());
    let csv = fs::read_to_string(a.path().join("simulate.csv")).unwrap();
    assert_eq!(csv.lines().count(), 21);
    assert!(csv.lines().next().unwrap().contains("policy"));
}

#[test]
fn simulate_uses_store_sizes() {
    let d = tempfile::tempdir().unwrap();
    let corpus = small_corpus(d.path(), "0.95");
    ok(d.path(), &["pack", "--corpus", &corpus, "--chunk-tokens", "48"]);
    let store = d.path().join("store");
    let r = ok(d.path(), &["simulate", "--store", store.to_str().unwrap(), "--gbps", "0.001", "--policy", "fixed-R240"]);
    assert_eq!(r["summary"]["chunks"], 2);
    let rows = r["rows"].as_array().unwrap();
    let packed = ok(d.path(), &["pack", "--corpus", &corpus, "--chunk-tokens", "48", "--resolutions", "R240"]);
    for (row, p) in rows.iter().zip(packed["rows"].as_array().unwrap()) {
        assert_eq!(row["bytes"], p["bytes"]);
    }
    assert!(r["summary"]["policies"]["fixed-R240"]["peak_restore_bytes"].as_u64().unwrap() > 0);
}

#[test]
fn simulate_with_zero_chunks_is_empty() {
    let d = tempfile::tempdir().unwrap();
    let r = ok(d.path(), &["simulate", "--gbps", "3", "--chunks", "0"]);
    assert!(r["rows"].as_array().unwrap().is_empty());
}

#[test]
fn schedule_empty_and_generated_traces() {
    let d = tempfile::tempdir().unwrap();
    let empty = d.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let r = ok(d.path(), &["schedule", "--trace", empty.to_str().unwrap()]);
    assert!(r["rows"].as_array().unwrap().is_empty());

    let g = ok(d.path(), &["--seed", "3", "schedule", "--generate", "15", "--compare-projection"]);
    assert_eq!(g["rows"].as_array().unwrap().len(), 15);
    let dev = g["summary"]["projection"]["max_abs_deviation_s"].as_f64().unwrap();
    assert!(dev <= 0.01 + 1e-9, "{dev}");
    let first = fs::read(d.path().join("schedule.json")).unwrap();
    // Replaying the written trace gives the same timelines.
    let trace = d.path().join("trace.jsonl");
    let replay_dir = tempfile::tempdir().unwrap();
    let again = ok(replay_dir.path(), &["--seed", "3", "schedule", "--trace", trace.to_str().unwrap(), "--compare-projection"]);
    let orig: Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(again["rows"], orig["rows"]);

    let blocking = ok(d.path(), &["--seed", "3", "schedule", "--generate", "15", "--mode", "blocking"]);
    assert_eq!(blocking["summary"]["mode"], "blocking");
}

#[test]
fn schedule_rejects_unsorted_trace() {
    let d = tempfile::tempdir().unwrap();
    let t = d.path().join("t.jsonl");
    fs::write(
        &t,
        "{\"id\":1,\"arrival_s\":2.0,\"context_tokens\":100,\"reuse\":false}\n{\"id\":2,\"arrival_s\":1.0,\"context_tokens\":100,\"reuse\":false}\n",
    )
    .unwrap();
    assert_eq!(code(&kvfetch(d.path(), &["schedule", "--trace", t.to_str().unwrap()])), 2);
}

#[test]
fn similarity_table_shape_and_orderings() {
    let d = tempfile::tempdir().unwrap();
    let corpus = small_corpus(d.path(), "0.9");
    let o = kvfetch(d.path(), &["--format", "csv", "similarity", "--corpus", &corpus]);
    assert!(o.status.success());
    let csv = fs::read_to_string(d.path().join("similarity.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "axis,mean_psnr,mean_ssim,pairs");
    assert_eq!(lines.len(), 5);
    assert!(String::from_utf8_lossy(&o.stdout).contains("\"token\""));

    let flat = small_corpus(d.path(), "1");
    let r = ok(d.path(), &["similarity", "--corpus", &flat]);
    let token = r["rows"].as_array().unwrap().iter().find(|x| x["axis"] == "token").unwrap().clone();
    assert_eq!(token["mean_ssim"].as_f64().unwrap(), 1.0);
}

#[test]
fn exit_codes_are_distinct() {
    let d = tempfile::tempdir().unwrap();
    // invalid argument
    assert_eq!(code(&kvfetch(d.path(), &["gen", "--smoothness", "1.5"])), 2);
    assert_eq!(code(&kvfetch(d.path(), &["simulate"])), 2);
    // io
    let missing = d.path().join("nope");
    assert_eq!(code(&kvfetch(d.path(), &["similarity", "--corpus", missing.to_str().unwrap()])), 3);
    // protocol: corrupted corpus data
    let corpus = small_corpus(d.path(), "0.5");
    let bin = Path::new(&corpus).join("kv.bin");
    let mut b = fs::read(&bin).unwrap();
    b[3] ^= 0x40;
    fs::write(&bin, b).unwrap();
    assert_eq!(code(&kvfetch(d.path(), &["similarity", "--corpus", &corpus])), 4);
    // not found: empty store
    let empty = d.path().join("empty-store");
    fs::create_dir_all(&empty).unwrap();
    assert_eq!(code(&kvfetch(d.path(), &["restore", "--store", empty.to_str().unwrap()])), 5);
}

struct Server(Child, String);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn start_server(store: &Path, extra: &[&str]) -> Server {
    let mut child = Command::new(env!("CARGO_BIN_EXE_kvfetch"))
        .args(["serve", "--store", store.to_str().unwrap(), "--addr", "127.0.0.1:0"])
        .args(extra)
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.split_whitespace().nth(2).expect("listening line").to_string();
    Server(child, addr)
}

#[test]
fn serve_and_fetch_over_loopback() {
    let d = tempfile::tempdir().unwrap();
    let corpus = small_corpus(d.path(), "0.95");
    let p = ok(d.path(), &["pack", "--corpus", &corpus, "--chunk-tokens", "48"]);
    let cache = p["summary"]["cache_id"].as_str().unwrap().to_string();
    let store = d.path().join("store");
    let r = ok(d.path(), &["restore", "--store", store.to_str().unwrap()]);
    let digest = |chunk: u64| {
        r["rows"].as_array().unwrap().iter().find(|x| x["chunk"] == chunk).unwrap()["values_sha256"].clone()
    };
    let server = start_server(&store, &[]);

    let f = ok(d.path(), &["fetch", "--addr", &server.1, "--cache-id", &cache, "--chunks", "1,0", "--resolution", "R480"]);
    let rows = f["rows"].as_array().unwrap();
    assert_eq!(rows[0]["chunk"], 1);
    assert_eq!(rows[0]["values_sha256"], digest(1));
    assert_eq!(rows[1]["values_sha256"], digest(0));

    let o = Command::new(env!("CARGO_BIN_EXE_kvfetch"))
        .args(["--out-dir", d.path().to_str().unwrap(), "fetch", "--live", "--cache-id", &cache, "--chunks", "0,1"])
        .env("KVFETCH_ADDR", &server.1)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let live: Value = serde_json::from_slice(&fs::read(d.path().join("fetch.json")).unwrap()).unwrap();
    assert_eq!(live["summary"]["restored"], 2);
    assert_eq!(live["rows"][0]["values_sha256"], digest(0));
    assert_eq!(live["rows"][1]["values_sha256"], digest(1));

    let missing = kvfetch(d.path(), &["fetch", "--addr", &server.1, "--cache-id", &cache, "--chunks", "9"]);
    assert_eq!(code(&missing), 5);
    let bad_id = kvfetch(d.path(), &["fetch", "--addr", &server.1, "--cache-id", "xyz", "--chunks", "0"]);
    assert_eq!(code(&bad_id), 2);
}

#[test]
fn fetch_times_out_on_a_silent_peer() {
    let d = tempfile::tempdir().unwrap();
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = l.local_addr().unwrap().to_string();
    let hold = std::thread::spawn(move || {
        let conn = l.accept();
        std::thread::sleep(std::time::Duration::from_secs(2));
        drop(conn);
    });
    let o = kvfetch(
        d.path(),
        &["fetch", "--addr", &addr, "--cache-id", &"ab".repeat(16), "--chunks", "0", "--timeout-s", "0.3"],
    );
    assert_eq!(code(&o), 6, "{}", String::from_utf8_lossy(&o.stderr));
    hold.join().unwrap();
}

#[test]
fn fetch_from_nothing_is_an_io_error() {
    let d = tempfile::tempdir().unwrap();
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().to_string();
    let o = kvfetch(d.path(), &["fetch", "--addr", &port, "--cache-id", &"00".repeat(16), "--chunks", "0"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn repro_chains_every_step() {
    let d = tempfile::tempdir().unwrap();
    let r = ok(d.path(), &["repro", "--tokens", "64", "--heads", "4", "--head-dim", "16"]);
    let steps: Vec<&str> = r["rows"].as_array().unwrap().iter().map(|x| x["step"].as_str().unwrap()).collect();
    assert_eq!(steps, ["gen", "search", "pack", "restore", "simulate"]);
    assert_eq!(r["summary"]["restore"]["bit_exact"], true);
    for s in steps {
        assert!(d.path().join(format!("{s}.json")).exists());
    }
    let first = fs::read(d.path().join("repro.json")).unwrap();
    ok(d.path(), &["repro", "--tokens", "64", "--heads", "4", "--head-dim", "16"]);
    assert_eq!(first, fs::read(d.path().join("repro.json")).unwrap());
}
