use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use kvfetch_core::{Error, Result};
use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn ext(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

/// Output of one command. Object keys serialize sorted.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportBundle {
    pub schema_version: u32,
    pub command: String,
    pub input_digest: String,
    pub summary: Value,
    pub rows: Vec<Value>,
}

impl ReportBundle {
    pub fn new(command: &str, input_digest: String) -> Self {
        ReportBundle {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            input_digest,
            summary: Value::Object(Map::new()),
            rows: Vec::new(),
        }
    }

    pub fn summary<T: Serialize>(mut self, s: &T) -> Result<Self> {
        self.summary = serde_json::to_value(s)?;
        Ok(self)
    }

    pub fn push_row<T: Serialize>(&mut self, row: &T) -> Result<()> {
        self.rows.push(serde_json::to_value(row)?);
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Rows only; columns are the sorted union of row keys.
    pub fn to_csv(&self) -> Result<String> {
        let mut cols: Vec<String> = Vec::new();
        for r in &self.rows {
            if let Value::Object(m) = r {
                for k in m.keys() {
                    if !cols.contains(k) {
                        cols.push(k.clone());
                    }
                }
            }
        }
        cols.sort();
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        if !cols.is_empty() {
            w.write_record(&cols).map_err(io)?;
        }
        for r in &self.rows {
            let cells: Vec<String> = cols.iter().map(|c| cell(r.get(c))).collect();
            w.write_record(&cells).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        String::from_utf8(bytes).map_err(|e| Error::Io(std::io::Error::other(e)))
    }

    pub fn render(&self, format: Format) -> Result<String> {
        match format {
            Format::Json => self.to_json(),
            Format::Csv => self.to_csv(),
        }
    }

    /// Writes `<out_dir>/<command>.<ext>`.
    pub fn write(&self, out_dir: &Path, format: Format) -> Result<PathBuf> {
        fs::create_dir_all(out_dir)?;
        let path = out_dir.join(format!("{}.{}", self.command, format.ext()));
        fs::write(&path, self.render(format)?)?;
        Ok(path)
    }
}

fn cell(v: Option<&Value>) -> String {
    match v {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(v @ (Value::Array(_) | Value::Object(_))) => v.to_string(),
        Some(v) => v.to_string(),
    }
}

/// Content digest of a command's inputs. Paths never enter it.
pub struct InputDigest(Sha256);

impl InputDigest {
    pub fn new(command: &str, seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update(seed.to_le_bytes());
        InputDigest(h)
    }

    pub fn param(&mut self, name: &str, value: impl std::fmt::Display) -> &mut Self {
        self.0.update(format!("\0{name}={value}").as_bytes());
        self
    }

    pub fn bytes(&mut self, name: &str, data: &[u8]) -> &mut Self {
        self.0.update(format!("\0{name}:{}:", data.len()).as_bytes());
        self.0.update(data);
        self
    }

    pub fn finish(self) -> String {
        hex(&self.0.finalize())
    }
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex(&Sha256::digest(data))
}

fn hex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn csv_uses_sorted_key_union() {
        let mut r = ReportBundle::new("t", String::new());
        r.push_row(&json!({"b": 1, "a": "x"})).unwrap();
        r.push_row(&json!({"c": null, "a": true})).unwrap();
        assert_eq!(r.to_csv().unwrap(), "a,b,c\nx,1,\ntrue,,\n");
    }

    #[test]
    fn empty_report_csv_is_empty() {
        assert_eq!(ReportBundle::new("t", String::new()).to_csv().unwrap(), "");
    }

    #[test]
    fn digest_tracks_params() {
        let d = |v: u32| {
            let mut d = InputDigest::new("x", 1);
            d.param("v", v);
            d.finish()
        };
        assert_eq!(d(1), d(1));
        assert_ne!(d(1), d(2));
    }
}
