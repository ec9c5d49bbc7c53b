//! Request traces (JSON lines), the synthetic arrival generator and TTFT metrics.

use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Uniform};
use serde::{Deserialize, Serialize};

use super::{EngineModel, Request, RequestTimeline, SchedulerMode};
use crate::error::{Error, Result};

/// Context length at or above which a request reuses stored KV.
pub const REUSE_THRESHOLD_TOKENS: usize = 40_000;

pub fn read_trace_jsonl<R: BufRead>(r: R) -> Result<Vec<Request>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let req: Request = serde_json::from_str(&line)
            .map_err(|e| Error::invalid(format!("trace line {}: {e}", n + 1)))?;
        out.push(req);
    }
    Ok(out)
}

pub fn write_trace_jsonl<W: Write>(mut w: W, trace: &[Request]) -> Result<()> {
    for r in trace {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// The trace with every reuse request removed.
pub fn non_reuse_projection(trace: &[Request]) -> Vec<Request> {
    trace.iter().filter(|r| !r.reuse).cloned().collect()
}

/// Poisson arrivals with log-uniform context lengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceGenSpec {
    pub requests: usize,
    pub rate_per_s: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub reuse_threshold: usize,
}

impl Default for TraceGenSpec {
    fn default() -> Self {
        TraceGenSpec {
            requests: 100,
            rate_per_s: 0.2,
            min_tokens: 1_000,
            max_tokens: 100_000,
            reuse_threshold: REUSE_THRESHOLD_TOKENS,
        }
    }
}

impl TraceGenSpec {
    pub fn generate(&self, engine: &EngineModel, seed: u64) -> Result<Vec<Request>> {
        if !(self.rate_per_s.is_finite() && self.rate_per_s > 0.0) {
            return Err(Error::invalid("arrival rate must be positive"));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::invalid("token range must satisfy 0 < min <= max"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gaps = Exp::new(self.rate_per_s).map_err(|e| Error::invalid(e.to_string()))?;
        let log_len = Uniform::new_inclusive((self.min_tokens as f64).ln(), (self.max_tokens as f64).ln());
        let mut t = 0.0;
        let mut out = Vec::with_capacity(self.requests);
        for id in 0..self.requests {
            t += gaps.sample(&mut rng);
            let tokens = (log_len.sample(&mut rng).exp().round() as usize).clamp(self.min_tokens, self.max_tokens);
            let reuse = tokens >= self.reuse_threshold;
            let chunk_ids = if reuse { (0..engine.chunks_for(tokens) as u32).collect() } else { Vec::new() };
            out.push(Request {
                id: id as u64,
                arrival_s: t,
                context_tokens: tokens,
                reuse,
                chunk_ids,
            });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub count: usize,
    pub mean_s: f64,
    pub p50_s: f64,
    pub p99_s: f64,
}

impl ClassStats {
    /// Nearest-rank percentiles; all zero for an empty class.
    pub fn from_values(values: &[f64]) -> Self {
        if values.is_empty() {
            return ClassStats { count: 0, mean_s: 0.0, p50_s: 0.0, p99_s: 0.0 };
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let rank = |p: f64| v[((p * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1];
        ClassStats {
            count: v.len(),
            mean_s: v.iter().sum::<f64>() / v.len() as f64,
            p50_s: rank(0.5),
            p99_s: rank(0.99),
        }
    }
}

pub const SCHEDULE_CSV_HEADER: &str =
    "id,reuse,context_tokens,arrival_s,chunks,fetch_done_s,admit_s,early_admit,compute_stall_s,first_token_s,ttft_s";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleReport {
    pub mode: SchedulerMode,
    pub quantum_s: f64,
    pub non_reuse: ClassStats,
    pub reuse: ClassStats,
    pub all: ClassStats,
    pub requests: Vec<RequestTimeline>,
}

impl ScheduleReport {
    pub fn new(mode: SchedulerMode, quantum_s: f64, requests: Vec<RequestTimeline>) -> Self {
        let ttfts = |f: &dyn Fn(&RequestTimeline) -> bool| -> Vec<f64> {
            requests.iter().filter(|r| f(r)).filter_map(|r| r.ttft_s).collect()
        };
        ScheduleReport {
            mode,
            quantum_s,
            non_reuse: ClassStats::from_values(&ttfts(&|r| !r.reuse)),
            reuse: ClassStats::from_values(&ttfts(&|r| r.reuse)),
            all: ClassStats::from_values(&ttfts(&|_| true)),
            requests,
        }
    }

    pub fn ttft(&self, id: u64) -> Option<f64> {
        self.requests.iter().find(|r| r.id == id).and_then(|r| r.ttft_s)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from(SCHEDULE_CSV_HEADER);
        out.push('\n');
        for r in &self.requests {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.id,
                r.reuse,
                r.context_tokens,
                r.arrival_s,
                r.chunks,
                opt(r.fetch_done_s),
                opt(r.admit_s),
                r.early_admit,
                r.compute_stall_s,
                opt(r.first_token_s),
                opt(r.ttft_s)
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_splits_classes_exactly() {
        let engine = EngineModel::default();
        let trace = TraceGenSpec { requests: 500, ..TraceGenSpec::default() }.generate(&engine, 3).unwrap();
        assert!(trace.iter().any(|r| r.reuse) && trace.iter().any(|r| !r.reuse));
        for r in &trace {
            assert_eq!(r.reuse, r.context_tokens >= 40_000);
            assert_eq!(r.chunk_ids.len(), if r.reuse { engine.chunks_for(r.context_tokens) } else { 0 });
        }
        let rate = trace.len() as f64 / trace.last().unwrap().arrival_s;
        assert!((rate - 0.2).abs() < 0.03, "{rate}");
    }

    #[test]
    fn jsonl_round_trip() {
        let trace = TraceGenSpec { requests: 20, ..TraceGenSpec::default() }
            .generate(&EngineModel::default(), 9)
            .unwrap();
        let mut buf = Vec::new();
        write_trace_jsonl(&mut buf, &trace).unwrap();
        assert_eq!(read_trace_jsonl(buf.as_slice()).unwrap(), trace);
        let short = r#"{"id": 1, "arrival_s": 0.5, "context_tokens": 10, "reuse": false}"#;
        assert_eq!(read_trace_jsonl(short.as_bytes()).unwrap()[0].chunk_ids, Vec::<u32>::new());
        assert!(read_trace_jsonl("{not json".as_bytes()).is_err());
    }

    #[test]
    fn nearest_rank_percentiles() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let s = ClassStats::from_values(&v);
        assert_eq!((s.p50_s, s.p99_s, s.mean_s), (50.0, 99.0, 50.5));
        assert_eq!(ClassStats::from_values(&[]).count, 0);
    }
}
