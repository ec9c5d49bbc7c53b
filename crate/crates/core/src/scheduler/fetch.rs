//! Background fetch co-simulation: chunk transfers sharing one link, each request
//! decoding its own chunks in order.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fetchsim::{select_resolution, BandwidthTrace, FetchPolicy, LookupTable, MB_PER_S_PER_GBPS};
use crate::layout::ResolutionClass;

const BYTES_PER_S_PER_GBPS: f64 = MB_PER_S_PER_GBPS * 1e6;

/// How concurrent fetches divide the link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sharing {
    #[default]
    Even,
    /// The oldest unpinned fetch takes whatever the pinned ones leave.
    Fcfs,
}

impl fmt::Display for Sharing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sharing::Even => "even",
            Sharing::Fcfs => "fcfs",
        })
    }
}

impl FromStr for Sharing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "even" => Ok(Sharing::Even),
            "fcfs" => Ok(Sharing::Fcfs),
            other => Err(Error::invalid(format!("unknown sharing mode {other:?}"))),
        }
    }
}

/// Link, decode table and resolution policy used for background fetches.
#[derive(Debug, Clone, PartialEq)]
pub struct FetchEnv {
    pub table: LookupTable,
    pub trace: BandwidthTrace,
    pub policy: FetchPolicy,
    pub sharing: Sharing,
}

impl FetchEnv {
    pub fn new(table: LookupTable, trace: BandwidthTrace, policy: FetchPolicy, sharing: Sharing) -> Result<Self> {
        table.validate()?;
        if let FetchPolicy::Fixed(r) = policy {
            table.row(r)?;
        }
        Ok(FetchEnv { table, trace, policy, sharing })
    }

    fn chunk_bytes(&self, r: ResolutionClass) -> f64 {
        self.table.size_mb(r).expect("validated table") * 1e6
    }

    fn decode_time(&self, r: ResolutionClass, active: Option<ResolutionClass>) -> f64 {
        let penalty = match active {
            Some(a) if a != r => self.table.penalty(r).expect("validated table"),
            _ => 0.0,
        };
        self.table.latency(r, 1).expect("validated table") + penalty
    }

    fn choose(&self, rate_bytes: f64, active: Option<ResolutionClass>) -> ResolutionClass {
        match self.policy {
            FetchPolicy::Fixed(r) => r,
            FetchPolicy::Adaptive => select_resolution(rate_bytes / BYTES_PER_S_PER_GBPS, 1, active, &self.table)
                .expect("positive rate and validated table"),
        }
    }
}

#[derive(Debug, Clone)]
struct Job {
    idx: usize,
    total: usize,
    started: usize,
    /// Resolution and bytes left of the chunk on the wire.
    current: Option<(ResolutionClass, f64)>,
    active: Option<ResolutionClass>,
    decoder_free: f64,
    decode_end: Vec<f64>,
    rate: f64,
    pinned: Option<f64>,
}

impl Job {
    fn transferring(&self) -> bool {
        self.current.is_some() || self.started < self.total
    }

    fn finish_transfer(&mut self, t: f64, env: &FetchEnv) {
        let (r, _) = self.current.take().expect("chunk in flight");
        let start = t.max(self.decoder_free);
        self.decoder_free = start + env.decode_time(r, self.active);
        self.decode_end.push(self.decoder_free);
        self.active = Some(r);
    }

    fn begin_chunk(&mut self, env: &FetchEnv, fallback_rate: f64) {
        if self.current.is_none() && self.started < self.total {
            let rate = if self.rate > 0.0 { self.rate } else { fallback_rate };
            let r = env.choose(rate, self.active);
            self.current = Some((r, env.chunk_bytes(r)));
            self.started += 1;
        }
    }
}

/// A finished fetch: when its last chunk is decoded and when each chunk is.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct FetchDone {
    pub idx: usize,
    pub done_s: f64,
    pub chunk_decode_end: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct FetchSim {
    env: FetchEnv,
    jobs: Vec<Job>,
}

impl FetchSim {
    pub fn new(env: FetchEnv) -> Self {
        FetchSim { env, jobs: Vec::new() }
    }

    pub fn is_idle(&self) -> bool {
        self.jobs.is_empty()
    }

    pub fn start(&mut self, idx: usize, chunks: usize, now: f64) {
        self.jobs.push(Job {
            idx,
            total: chunks,
            started: 0,
            current: None,
            active: None,
            decoder_free: now,
            decode_end: Vec::with_capacity(chunks),
            rate: 0.0,
            pinned: None,
        });
        self.reallocate(now);
    }

    /// Splits the link among transferring jobs and starts any chunk that is due.
    pub fn reallocate(&mut self, now: f64) {
        let link = self.env.trace.rate_at(now) * BYTES_PER_S_PER_GBPS;
        let pinned: f64 = self.jobs.iter().filter(|j| j.transferring()).filter_map(|j| j.pinned).sum();
        let scale = if pinned > link { link / pinned } else { 1.0 };
        let rest = (link - pinned).max(0.0);
        let unpinned = self.jobs.iter().filter(|j| j.transferring() && j.pinned.is_none()).count();
        let mut first = true;
        for j in self.jobs.iter_mut() {
            j.rate = match (j.transferring(), j.pinned) {
                (false, _) => 0.0,
                (true, Some(p)) => p * scale,
                (true, None) => match self.env.sharing {
                    Sharing::Even => rest / unpinned as f64,
                    Sharing::Fcfs if first => {
                        first = false;
                        rest
                    }
                    Sharing::Fcfs => 0.0,
                },
            };
        }
        let fallback = link / self.jobs.len().max(1) as f64;
        for j in self.jobs.iter_mut() {
            j.begin_chunk(&self.env, fallback);
        }
    }

    /// Earliest transfer completion or link rate change after `now`.
    pub fn next_event(&self, now: f64) -> f64 {
        let mut t = self
            .env
            .trace
            .segments()
            .iter()
            .map(|s| s.start_s)
            .find(|&s| s > now)
            .unwrap_or(f64::INFINITY);
        if self.jobs.is_empty() {
            return f64::INFINITY;
        }
        for j in &self.jobs {
            if let Some((_, rem)) = j.current {
                if j.rate > 0.0 {
                    t = t.min(now + rem / j.rate);
                }
            }
        }
        t
    }

    /// Moves transfers forward from `now` to `t`; returns fetches whose last chunk
    /// left the wire.
    pub fn advance(&mut self, now: f64, t: f64) -> Vec<FetchDone> {
        let dt = t - now;
        let env = &self.env;
        for j in self.jobs.iter_mut() {
            if let Some((_, rem)) = j.current.as_mut() {
                if j.rate > 0.0 && now + *rem / j.rate <= t + 1e-12 {
                    *rem = 0.0;
                } else {
                    *rem -= j.rate * dt;
                }
                if *rem <= 0.0 {
                    j.finish_transfer(t, env);
                }
            }
        }
        let mut done = Vec::new();
        self.jobs.retain(|j| {
            if j.transferring() {
                return true;
            }
            done.push(FetchDone {
                idx: j.idx,
                done_s: j.decoder_free,
                chunk_decode_end: j.decode_end.clone(),
            });
            false
        });
        done
    }

    /// Freezes a job's current rate for the rest of its fetch.
    pub fn pin(&mut self, idx: usize) {
        if let Some(j) = self.jobs.iter_mut().find(|j| j.idx == idx) {
            j.pinned = Some(j.rate);
        }
    }

    /// Lower bound on the time left on the wire at the job's current rate.
    pub fn min_transfer_left(&self, idx: usize) -> Option<f64> {
        let j = self.jobs.iter().find(|j| j.idx == idx)?;
        if j.rate <= 0.0 {
            return None;
        }
        let smallest = self
            .env
            .table
            .resolutions()
            .into_iter()
            .map(|r| self.env.chunk_bytes(r))
            .fold(f64::INFINITY, f64::min);
        let current = j.current.map_or(0.0, |(_, rem)| rem);
        Some((current + (j.total - j.started) as f64 * smallest) / j.rate)
    }

    /// `predict`, skipped when the wire alone outlasts a compute window of `budget_s`.
    pub fn predict_if_feasible(&self, idx: usize, now: f64, budget_s: f64) -> Option<Vec<f64>> {
        if self.min_transfer_left(idx)? > budget_s {
            return None;
        }
        self.predict(idx, now)
    }

    /// Chunk decode end times if the job kept its current rate from `now` on.
    pub fn predict(&self, idx: usize, now: f64) -> Option<Vec<f64>> {
        let mut j = self.jobs.iter().find(|j| j.idx == idx)?.clone();
        if j.rate <= 0.0 {
            return None;
        }
        let mut t = now;
        loop {
            match j.current {
                Some((_, rem)) => {
                    t += rem / j.rate;
                    j.finish_transfer(t, &self.env);
                }
                None if j.started < j.total => j.begin_chunk(&self.env, j.rate),
                None => return Some(j.decode_end),
            }
        }
    }
}
