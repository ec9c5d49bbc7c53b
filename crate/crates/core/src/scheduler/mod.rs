//! Fetching-aware request scheduler simulator.
//!
//! Non-reuse requests queue in `waiting`; reuse requests park in `waiting_for_kv`
//! while their KV chunks are fetched in the background and join `running` at the
//! first iteration boundary after the fetch completes, or earlier when the
//! remaining layers can be fetched behind compute.

mod fetch;
mod trace;

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec::CHUNK_TOKENS;
use crate::error::{Error, Result};
use crate::fetchsim::{check_nonblocking, PipelineCheck};

pub use fetch::{FetchEnv, Sharing};
pub use trace::{
    non_reuse_projection, read_trace_jsonl, write_trace_jsonl, ClassStats, ScheduleReport, TraceGenSpec,
    REUSE_THRESHOLD_TOKENS, SCHEDULE_CSV_HEADER,
};

use fetch::{FetchDone, FetchSim};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub arrival_s: f64,
    pub context_tokens: usize,
    pub reuse: bool,
    #[serde(default)]
    pub chunk_ids: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestState {
    Waiting,
    WaitingForKv,
    Running,
    Done,
}

/// Prefill cost model of the serving engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineModel {
    /// Linear prefill coefficient, seconds per token.
    pub a: f64,
    /// Quadratic prefill coefficient, seconds per token squared.
    pub b: f64,
    pub quantum_s: f64,
    /// Tokens the running batch may hold; `None` is unlimited.
    pub capacity_tokens: Option<usize>,
    pub layers: usize,
    /// Compute a reuse request still needs once its KV is resident.
    pub epilogue_s: f64,
}

impl Default for EngineModel {
    fn default() -> Self {
        EngineModel {
            a: 1.0e-5,
            b: 2.5e-10,
            quantum_s: 0.01,
            capacity_tokens: None,
            layers: 32,
            epilogue_s: 0.05,
        }
    }
}

impl EngineModel {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(self.a) && ok(self.b) && ok(self.epilogue_s)) {
            return Err(Error::Config("engine coefficients must be finite and non-negative".into()));
        }
        if !(self.quantum_s.is_finite() && self.quantum_s > 0.0) {
            return Err(Error::Config("iteration quantum must be positive".into()));
        }
        if self.layers == 0 {
            return Err(Error::Config("engine needs at least one layer".into()));
        }
        if self.capacity_tokens == Some(0) {
            return Err(Error::Config("batch capacity must be positive".into()));
        }
        Ok(())
    }

    pub fn t_prefill(&self, tokens: usize) -> f64 {
        let n = tokens as f64;
        self.a * n + self.b * n * n
    }

    pub fn layer_compute_s(&self) -> f64 {
        self.epilogue_s / self.layers as f64
    }

    pub fn triplets(&self) -> usize {
        self.layers.div_ceil(3)
    }

    /// Chunks a reuse request of `tokens` fetches: token chunks times layer triplets.
    pub fn chunks_for(&self, tokens: usize) -> usize {
        tokens.div_ceil(CHUNK_TOKENS).max(1) * self.triplets()
    }
}

/// Layer-wise compute from `start`, layer `k` waiting for `layer_ready[k]`.
/// Returns the finish time and the total time compute stalled on the fetch.
pub fn layer_pipeline(start: f64, layer_ready: &[f64], layer_compute_s: f64) -> (f64, f64) {
    let mut end = start;
    let mut stall = 0.0;
    for &ready in layer_ready {
        if ready > end {
            stall += ready - end;
            end = ready;
        }
        end += layer_compute_s;
    }
    (end, stall)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerMode {
    #[default]
    FetchAware,
    /// Reuse requests wait in the FCFS queue and block everything behind them.
    Blocking,
}

impl fmt::Display for SchedulerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SchedulerMode::FetchAware => "fetch_aware",
            SchedulerMode::Blocking => "blocking",
        })
    }
}

impl FromStr for SchedulerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "fetch_aware" | "aware" => Ok(SchedulerMode::FetchAware),
            "blocking" => Ok(SchedulerMode::Blocking),
            other => Err(Error::invalid(format!("unknown scheduler mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub mode: SchedulerMode,
    pub early_admission: bool,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            mode: SchedulerMode::FetchAware,
            early_admission: true,
        }
    }
}

/// Per-request outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestTimeline {
    pub id: u64,
    pub reuse: bool,
    pub context_tokens: usize,
    pub arrival_s: f64,
    pub chunks: usize,
    pub fetch_done_s: Option<f64>,
    pub admit_s: Option<f64>,
    pub early_admit: bool,
    pub compute_stall_s: f64,
    pub first_token_s: Option<f64>,
    pub ttft_s: Option<f64>,
    pub state: RequestState,
}

#[derive(Debug, Clone)]
struct Entry {
    req: Request,
    state: RequestState,
    chunks: usize,
    fetch_done: Option<f64>,
    layer_ready: Option<Vec<f64>>,
    admit: Option<f64>,
    early: bool,
    stall: f64,
    finish: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Scheduler {
    engine: EngineModel,
    cfg: SchedulerConfig,
    fetch: Option<FetchSim>,
    now: f64,
    next_boundary: u64,
    ids: HashMap<u64, usize>,
    entries: Vec<Entry>,
    waiting: VecDeque<usize>,
    waiting_for_kv: Vec<usize>,
    running: Vec<usize>,
    used_tokens: usize,
}

impl Scheduler {
    /// Without a fetch environment, reuse requests complete only through
    /// [`Scheduler::on_fetch_complete`].
    pub fn new(engine: EngineModel, cfg: SchedulerConfig, fetch: Option<FetchEnv>) -> Result<Self> {
        engine.validate()?;
        Ok(Scheduler {
            engine,
            cfg,
            fetch: fetch.map(FetchSim::new),
            now: 0.0,
            next_boundary: 0,
            ids: HashMap::new(),
            entries: Vec::new(),
            waiting: VecDeque::new(),
            waiting_for_kv: Vec::new(),
            running: Vec::new(),
            used_tokens: 0,
        })
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn state(&self, id: u64) -> Option<RequestState> {
        self.ids.get(&id).map(|&i| self.entries[i].state)
    }

    pub fn waiting(&self) -> Vec<u64> {
        self.waiting.iter().map(|&i| self.entries[i].req.id).collect()
    }

    pub fn waiting_for_kv(&self) -> Vec<u64> {
        self.waiting_for_kv.iter().map(|&i| self.entries[i].req.id).collect()
    }

    pub fn running(&self) -> Vec<u64> {
        self.running.iter().map(|&i| self.entries[i].req.id).collect()
    }

    fn boundary_time(&self) -> f64 {
        self.next_boundary as f64 * self.engine.quantum_s
    }

    /// Enqueues a request arriving now or later; the clock moves to its arrival.
    pub fn submit(&mut self, req: Request) -> Result<RequestState> {
        if !(req.arrival_s.is_finite() && req.arrival_s >= self.now) {
            return Err(Error::invalid(format!(
                "request {} arrives at {} before the current time {}",
                req.id, req.arrival_s, self.now
            )));
        }
        if self.ids.contains_key(&req.id) {
            return Err(Error::invalid(format!("duplicate request id {}", req.id)));
        }
        if let Some(cap) = self.engine.capacity_tokens {
            if req.context_tokens > cap {
                return Err(Error::invalid(format!(
                    "request {} needs {} tokens but the batch holds {cap}",
                    req.id, req.context_tokens
                )));
            }
        }
        let chunks = if req.reuse { self.engine.chunks_for(req.context_tokens) } else { 0 };
        if req.reuse && !req.chunk_ids.is_empty() && req.chunk_ids.len() != chunks {
            return Err(Error::invalid(format!(
                "request {} lists {} chunks, its context spans {chunks}",
                req.id,
                req.chunk_ids.len()
            )));
        }
        self.advance_to(req.arrival_s)?;
        let idx = self.entries.len();
        let state = match (req.reuse, self.cfg.mode) {
            (false, _) | (true, SchedulerMode::Blocking) => RequestState::Waiting,
            (true, SchedulerMode::FetchAware) => RequestState::WaitingForKv,
        };
        match state {
            RequestState::Waiting => self.waiting.push_back(idx),
            _ => self.waiting_for_kv.push(idx),
        }
        if req.reuse {
            if let Some(f) = self.fetch.as_mut() {
                f.start(idx, chunks, self.now);
            }
        }
        self.ids.insert(req.id, idx);
        self.entries.push(Entry {
            req,
            state,
            chunks,
            fetch_done: None,
            layer_ready: None,
            admit: None,
            early: false,
            stall: 0.0,
            finish: None,
        });
        Ok(state)
    }

    /// Records that a request's KV is fully resident at `t`.
    pub fn on_fetch_complete(&mut self, id: u64, t: f64) -> Result<()> {
        let &idx = self.ids.get(&id).ok_or_else(|| Error::NotFound(format!("request {id}")))?;
        if t < self.now {
            return Err(Error::invalid(format!("completion at {t} is before the current time {}", self.now)));
        }
        let e = &self.entries[idx];
        if !e.req.reuse || e.fetch_done.is_some() {
            return Err(Error::InvalidState(format!("request {id} has no fetch outstanding")));
        }
        let ready = vec![t; self.engine.layers];
        self.complete_fetch(idx, t, ready);
        Ok(())
    }

    fn complete_fetch(&mut self, idx: usize, t: f64, layer_ready: Vec<f64>) {
        let lc = self.engine.layer_compute_s();
        let e = &mut self.entries[idx];
        e.fetch_done = Some(t);
        if let Some(admit) = e.admit {
            let (finish, stall) = layer_pipeline(admit, &layer_ready, lc);
            e.finish = Some(finish);
            e.stall = stall;
        }
        e.layer_ready = Some(layer_ready);
    }

    fn layer_ready_from_chunks(&self, chunk_ends: &[f64], chunks: usize) -> Vec<f64> {
        let per_triplet = chunks / self.engine.triplets();
        (0..self.engine.layers)
            .map(|l| {
                let last = ((l / 3) + 1) * per_triplet;
                chunk_ends.get(last - 1).copied().unwrap_or(f64::INFINITY)
            })
            .collect()
    }

    fn apply_fetch_done(&mut self, done: Vec<FetchDone>) {
        for d in done {
            let ready = self.layer_ready_from_chunks(&d.chunk_decode_end, self.entries[d.idx].chunks);
            self.complete_fetch(d.idx, d.done_s, ready);
        }
    }

    fn move_to(&mut self, t: f64) {
        if let Some(f) = self.fetch.as_mut() {
            let done = f.advance(self.now, t);
            self.now = t;
            self.apply_fetch_done(done);
            if let Some(f) = self.fetch.as_mut() {
                f.reallocate(t);
            }
        } else {
            self.now = t;
        }
    }

    fn next_fetch_event(&self) -> f64 {
        self.fetch.as_ref().map_or(f64::INFINITY, |f| f.next_event(self.now))
    }

    fn quiescent(&self) -> bool {
        self.waiting.is_empty()
            && self.waiting_for_kv.is_empty()
            && self.fetch.as_ref().is_none_or(|f| f.is_idle())
            && self.running.iter().all(|&i| self.entries[i].finish.is_some())
    }

    /// Skips boundaries that can only retire finished requests.
    fn fast_forward(&mut self, limit: f64) {
        if !self.quiescent() {
            return;
        }
        let q = self.engine.quantum_s;
        let target = if limit.is_finite() {
            (limit / q).ceil() as u64
        } else {
            let last = self.running.iter().filter_map(|&i| self.entries[i].finish).fold(0.0, f64::max);
            (last / q).ceil() as u64
        };
        if target > self.next_boundary + 1 {
            self.next_boundary = target - 1;
            self.retire(self.boundary_time());
        }
    }

    fn retire(&mut self, b: f64) {
        let entries = &mut self.entries;
        let mut freed = 0;
        self.running.retain(|&i| match entries[i].finish {
            Some(f) if f <= b => {
                entries[i].state = RequestState::Done;
                freed += entries[i].req.context_tokens;
                false
            }
            _ => true,
        });
        self.used_tokens -= freed;
    }

    fn fits(&self, idx: usize) -> bool {
        self.engine
            .capacity_tokens
            .is_none_or(|cap| self.used_tokens + self.entries[idx].req.context_tokens <= cap)
    }

    fn admit(&mut self, idx: usize, b: f64, early: bool) {
        let lc = self.engine.layer_compute_s();
        let prefill = self.engine.t_prefill(self.entries[idx].req.context_tokens);
        let e = &mut self.entries[idx];
        e.state = RequestState::Running;
        e.admit = Some(b);
        e.early = early;
        if !e.req.reuse {
            e.finish = Some(b + prefill);
        } else if let Some(ready) = &e.layer_ready {
            let (finish, stall) = layer_pipeline(b, ready, lc);
            e.finish = Some(finish);
            e.stall = stall;
        }
        self.used_tokens += e.req.context_tokens;
        self.running.push(idx);
    }

    fn fetched_by(&self, idx: usize, b: f64) -> bool {
        self.entries[idx].fetch_done.is_some_and(|t| t <= b)
    }

    /// Early admission test for a reuse request still being fetched.
    fn can_admit_early(&self, idx: usize, b: f64) -> bool {
        let ready = match (&self.entries[idx].layer_ready, self.fetch.as_ref()) {
            (Some(r), _) => r.clone(),
            (None, Some(f)) => match f.predict_if_feasible(idx, b, self.engine.epilogue_s) {
                Some(ends) => self.layer_ready_from_chunks(&ends, self.entries[idx].chunks),
                None => return false,
            },
            (None, None) => return false,
        };
        let l_buf = ready.iter().take_while(|&&r| r <= b).count();
        let mut prev = 0.0;
        let t_decode: Vec<f64> = ready
            .iter()
            .map(|&r| {
                let cum = (r - b).max(0.0);
                let d = cum - prev;
                prev = cum;
                d
            })
            .collect();
        let t_comp = vec![self.engine.layer_compute_s(); ready.len()];
        PipelineCheck::new(t_decode, t_comp, l_buf).is_ok_and(|pc| check_nonblocking(&pc))
    }

    fn process_boundary(&mut self) {
        let b = self.boundary_time();
        self.next_boundary += 1;
        self.retire(b);
        let mut candidates: Vec<usize> = self.waiting.iter().copied().collect();
        if self.cfg.mode == SchedulerMode::FetchAware {
            candidates.extend(self.waiting_for_kv.iter().copied().filter(|&i| self.fetched_by(i, b)));
            candidates.sort_unstable();
        }
        for idx in candidates {
            if self.entries[idx].req.reuse && !self.fetched_by(idx, b) {
                break;
            }
            if !self.fits(idx) {
                break;
            }
            self.admit(idx, b, false);
        }
        if self.cfg.mode == SchedulerMode::FetchAware && self.cfg.early_admission {
            let pending: Vec<usize> = self
                .waiting_for_kv
                .iter()
                .copied()
                .filter(|&i| !self.fetched_by(i, b))
                .collect();
            for idx in pending {
                if self.fits(idx) && self.can_admit_early(idx, b) {
                    if let (None, Some(f)) = (self.entries[idx].fetch_done, self.fetch.as_mut()) {
                        f.pin(idx);
                    }
                    self.admit(idx, b, true);
                }
            }
        }
        let entries = &self.entries;
        self.waiting.retain(|&i| entries[i].state != RequestState::Running);
        self.waiting_for_kv.retain(|&i| entries[i].state != RequestState::Running);
        if let Some(f) = self.fetch.as_mut() {
            f.reallocate(b);
        }
    }

    /// Runs every event strictly before `t`, then moves the clock to `t`.
    pub fn advance_to(&mut self, t: f64) -> Result<()> {
        if t < self.now {
            return Err(Error::invalid(format!("cannot move the clock back from {} to {t}", self.now)));
        }
        loop {
            self.fast_forward(t);
            let nb = self.boundary_time();
            let next = nb.min(self.next_fetch_event());
            if next >= t {
                self.move_to(t);
                return Ok(());
            }
            self.move_to(next);
            if next == nb {
                self.process_boundary();
            }
        }
    }

    /// Runs until every submitted request has produced its first token.
    pub fn run_to_completion(&mut self) -> Result<()> {
        if self.fetch.is_none() {
            if let Some(e) = self.entries.iter().find(|e| e.req.reuse && e.fetch_done.is_none()) {
                return Err(Error::InvalidState(format!(
                    "request {} waits on a fetch nothing will complete",
                    e.req.id
                )));
            }
        }
        while self.entries.iter().any(|e| e.state != RequestState::Done) {
            self.fast_forward(f64::INFINITY);
            let nb = self.boundary_time();
            let next = nb.min(self.next_fetch_event()).max(self.now);
            self.move_to(next);
            if next == nb {
                self.process_boundary();
            }
        }
        Ok(())
    }

    pub fn timelines(&self) -> Vec<RequestTimeline> {
        self.entries
            .iter()
            .map(|e| RequestTimeline {
                id: e.req.id,
                reuse: e.req.reuse,
                context_tokens: e.req.context_tokens,
                arrival_s: e.req.arrival_s,
                chunks: e.chunks,
                fetch_done_s: e.fetch_done,
                admit_s: e.admit,
                early_admit: e.early,
                compute_stall_s: e.stall,
                first_token_s: e.finish,
                ttft_s: e.finish.map(|f| f - e.req.arrival_s),
                state: e.state,
            })
            .collect()
    }

    /// Each request sits in exactly the queue its state names.
    pub fn check_queues(&self) -> Result<()> {
        for (i, e) in self.entries.iter().enumerate() {
            let hits = [
                self.waiting.contains(&i),
                self.waiting_for_kv.contains(&i),
                self.running.contains(&i),
            ];
            let expected = match e.state {
                RequestState::Waiting => [true, false, false],
                RequestState::WaitingForKv => [false, true, false],
                RequestState::Running => [false, false, true],
                RequestState::Done => [false, false, false],
            };
            if hits != expected {
                return Err(Error::InvalidState(format!("request {} is misfiled as {:?}", e.req.id, e.state)));
            }
        }
        Ok(())
    }
}

/// Co-simulates the scheduler and background fetches over a trace sorted by arrival.
pub fn run_trace(
    trace: &[Request],
    engine: &EngineModel,
    fetch_env: Option<&FetchEnv>,
    cfg: SchedulerConfig,
) -> Result<ScheduleReport> {
    if trace.windows(2).any(|w| w[1].arrival_s < w[0].arrival_s) {
        return Err(Error::invalid("trace is not sorted by arrival time"));
    }
    let mut s = Scheduler::new(engine.clone(), cfg, fetch_env.cloned())?;
    for r in trace {
        s.submit(r.clone())?;
    }
    s.run_to_completion()?;
    Ok(ScheduleReport::new(cfg.mode, engine.quantum_s, s.timelines()))
}
