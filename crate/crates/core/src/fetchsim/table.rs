use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::ResolutionClass;

/// Gbps to decimal megabytes per second.
pub const MB_PER_S_PER_GBPS: f64 = 125.0;

const H20_JSON: &str = include_str!("../../tables/h20.json");
const L20_JSON: &str = include_str!("../../tables/l20.json");
const A100_JSON: &str = include_str!("../../tables/a100.json");
const STEP_FIXTURE_JSON: &str = include_str!("../../tables/fixtures/bandwidth_step.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    /// Decode latency at pool concurrency `1..=pool_size`.
    pub latency_s: Vec<f64>,
    pub penalty_s: f64,
    pub size_mb: f64,
}

/// Profiled decode latency per resolution and pool load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookupTable {
    pub device: String,
    pub pool_size: usize,
    pub rows: BTreeMap<ResolutionClass, TableRow>,
}

impl LookupTable {
    pub fn from_json(s: &str) -> Result<Self> {
        let t: LookupTable = serde_json::from_str(s)?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn h20() -> Self {
        Self::from_json(H20_JSON).expect("bundled H20 table")
    }

    pub fn l20() -> Self {
        Self::from_json(L20_JSON).expect("bundled L20 table")
    }

    pub fn a100() -> Self {
        Self::from_json(A100_JSON).expect("bundled A100 table")
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "h20" => Some(Self::h20()),
            "l20" => Some(Self::l20()),
            "a100" => Some(Self::a100()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("table {}: {m}", self.device)));
        if self.pool_size == 0 {
            return bad("pool_size must be positive".into());
        }
        if self.rows.is_empty() {
            return bad("no resolution rows".into());
        }
        for (r, row) in &self.rows {
            if row.latency_s.len() != self.pool_size {
                return bad(format!("{r} has {} latencies for pool size {}", row.latency_s.len(), self.pool_size));
            }
            if row.latency_s.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return bad(format!("{r} latencies must be positive"));
            }
            if row.latency_s.windows(2).any(|w| w[1] < w[0]) {
                return bad(format!("{r} latencies decrease with concurrency"));
            }
            if !(row.penalty_s.is_finite() && row.penalty_s >= 0.0) {
                return bad(format!("{r} penalty must be non-negative"));
            }
            if !(row.size_mb.is_finite() && row.size_mb > 0.0) {
                return bad(format!("{r} size must be positive"));
            }
        }
        if let Some(top) = self.rows.get(&ResolutionClass::R1080) {
            if top.penalty_s != 0.0 {
                return bad("R1080 penalty must be zero".into());
            }
        }
        Ok(())
    }

    pub fn row(&self, r: ResolutionClass) -> Result<&TableRow> {
        self.rows
            .get(&r)
            .ok_or_else(|| Error::Config(format!("table {} has no row for {r}", self.device)))
    }

    pub fn latency(&self, r: ResolutionClass, load: usize) -> Result<f64> {
        let row = self.row(r)?;
        if load == 0 || load > self.pool_size {
            return Err(Error::invalid(format!("pool load {load} outside 1..={}", self.pool_size)));
        }
        Ok(row.latency_s[load - 1])
    }

    pub fn penalty(&self, r: ResolutionClass) -> Result<f64> {
        Ok(self.row(r)?.penalty_s)
    }

    pub fn size_mb(&self, r: ResolutionClass) -> Result<f64> {
        Ok(self.row(r)?.size_mb)
    }

    pub fn max_penalty(&self) -> f64 {
        self.rows.values().map(|r| r.penalty_s).fold(0.0, f64::max)
    }

    pub fn resolutions(&self) -> Vec<ResolutionClass> {
        self.rows.keys().copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start_s: f64,
    pub gbps: f64,
}

/// Piecewise-constant link rate. The last segment extends forever.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Segment>", into = "Vec<Segment>")]
pub struct BandwidthTrace {
    segments: Vec<Segment>,
}

impl TryFrom<Vec<Segment>> for BandwidthTrace {
    type Error = Error;

    fn try_from(v: Vec<Segment>) -> Result<Self> {
        BandwidthTrace::new(v)
    }
}

impl From<BandwidthTrace> for Vec<Segment> {
    fn from(t: BandwidthTrace) -> Self {
        t.segments
    }
}

impl BandwidthTrace {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        let first = segments.first().ok_or_else(|| Error::invalid("bandwidth trace is empty"))?;
        if first.start_s != 0.0 {
            return Err(Error::invalid("bandwidth trace must start at t = 0"));
        }
        if segments.windows(2).any(|w| !(w[1].start_s > w[0].start_s)) {
            return Err(Error::invalid("segment start times must be strictly increasing"));
        }
        if segments.iter().any(|s| !(s.gbps.is_finite() && s.gbps > 0.0) || !s.start_s.is_finite()) {
            return Err(Error::invalid("segment rates must be positive and finite"));
        }
        Ok(BandwidthTrace { segments })
    }

    pub fn constant(gbps: f64) -> Result<Self> {
        Self::new(vec![Segment { start_s: 0.0, gbps }])
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn rate_at(&self, t: f64) -> f64 {
        let i = self.segments.partition_point(|s| s.start_s <= t).max(1) - 1;
        self.segments[i].gbps
    }

    /// Time at which a transfer of `bytes` started at `start` completes.
    pub fn transfer_end(&self, start: f64, bytes: f64) -> f64 {
        let mut t = start;
        let mut remaining = bytes;
        let mut i = self.segments.partition_point(|s| s.start_s <= t).max(1) - 1;
        loop {
            let rate = self.segments[i].gbps * MB_PER_S_PER_GBPS * 1e6;
            match self.segments.get(i + 1) {
                Some(next) if (next.start_s - t) * rate < remaining => {
                    remaining -= (next.start_s - t) * rate;
                    t = next.start_s;
                    i += 1;
                }
                _ => return t + remaining / rate,
            }
        }
    }
}

/// The bandwidth-step scenario used to exercise resolution switching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFixture {
    pub table: LookupTable,
    pub trace: BandwidthTrace,
    pub chunks: usize,
    pub prior_gbps: f64,
}

impl StepFixture {
    pub fn bundled() -> Self {
        let f: StepFixture = serde_json::from_str(STEP_FIXTURE_JSON).expect("bundled step fixture");
        f.table.validate().expect("bundled step fixture table");
        f
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_tables_validate() {
        for (t, p) in [(LookupTable::h20(), 7), (LookupTable::l20(), 3), (LookupTable::a100(), 5)] {
            assert_eq!(t.pool_size, p);
            assert_eq!(t.rows.len(), 4);
            assert_eq!(t.penalty(ResolutionClass::R1080).unwrap(), 0.0);
            assert_eq!(t.size_mb(ResolutionClass::R240).unwrap(), 180.0);
        }
        let h = LookupTable::h20();
        assert_eq!(h.latency(ResolutionClass::R240, 7).unwrap(), 0.62);
        assert_eq!(h.latency(ResolutionClass::R1080, 1).unwrap(), 0.19);
        assert!(h.latency(ResolutionClass::R1080, 8).is_err());
        assert_eq!(h.max_penalty(), 0.08);
    }

    #[test]
    fn non_monotone_table_rejected() {
        let mut t = LookupTable::l20();
        t.rows.get_mut(&ResolutionClass::R480).unwrap().latency_s = vec![0.2, 0.1, 0.3];
        assert!(matches!(t.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn transfer_spans_segments() {
        let tr = BandwidthTrace::new(vec![
            Segment { start_s: 0.0, gbps: 8.0 },
            Segment { start_s: 1.0, gbps: 4.0 },
        ])
        .unwrap();
        // 1 GB at 8 Gbps takes 1 s; the next 0.5 GB at 4 Gbps takes 1 s more.
        assert!((tr.transfer_end(0.0, 1.5e9) - 2.0).abs() < 1e-12);
        assert!((tr.transfer_end(1.5, 0.5e9) - 2.5).abs() < 1e-12);
        assert_eq!(tr.rate_at(0.999), 8.0);
        assert_eq!(tr.rate_at(1.0), 4.0);
    }

    #[test]
    fn bad_traces_rejected() {
        assert!(BandwidthTrace::new(vec![]).is_err());
        assert!(BandwidthTrace::constant(0.0).is_err());
        let unordered = vec![Segment { start_s: 0.0, gbps: 1.0 }, Segment { start_s: 0.0, gbps: 2.0 }];
        assert!(BandwidthTrace::new(unordered).is_err());
        assert!(serde_json::from_str::<BandwidthTrace>(r#"[{"start_s": 1.0, "gbps": 2.0}]"#).is_err());
    }

    #[test]
    fn step_fixture_loads() {
        let f = StepFixture::bundled();
        assert_eq!(f.table.pool_size, 1);
        assert_eq!(f.trace.segments().len(), 3);
        assert!((f.trace.segments()[2].start_s - (256.0 / 750.0 + 4.0 * 256.0 / 375.0)).abs() < 1e-12);
    }
}
