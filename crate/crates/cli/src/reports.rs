//! CSV and JSON payload writers. Every CSV row leads with
//! `config_digest, seed, epoch`; columns are only ever appended.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport<'a> {
    pub kind: &'a str,
    pub version: &'a str,
    pub config_digest: String,
    pub config: &'a RunConfig,
    pub payloads: Vec<String>,
    pub wall_clock_secs: f64,
}

/// Collects payload files written into one output directory.
#[derive(Debug)]
pub struct Writer {
    dir: PathBuf,
    pub digest: String,
    pub seed: u64,
    pub written: Vec<String>,
}

fn cell(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::Null => String::new(),
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl Writer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let dir = cfg.out_dir();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir, digest: cfg.digest(), seed: cfg.seed, written: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Writes `rows` (each with its epoch) under the shared key columns.
    /// Rows must serialize as flat structs.
    pub fn csv<R: Serialize>(&mut self, name: &str, rows: impl IntoIterator<Item = (usize, R)>) -> Result<()> {
        let mut w = csv::Writer::from_path(self.dir.join(name))?;
        let mut header: Option<Vec<String>> = None;
        for (epoch, row) in rows {
            let serde_json::Value::Object(fields) = serde_json::to_value(&row)? else {
                return Err(CliError::Invalid(format!("{name}: row is not a struct")));
            };
            if header.is_none() {
                let mut h: Vec<String> = ["config_digest", "seed", "epoch"].map(String::from).to_vec();
                h.extend(fields.keys().cloned());
                w.write_record(&h)?;
                header = Some(h);
            }
            let mut rec = vec![self.digest.clone(), self.seed.to_string(), epoch.to_string()];
            rec.extend(fields.values().map(cell));
            w.write_record(&rec)?;
        }
        if header.is_none() {
            w.write_record(["config_digest", "seed", "epoch"])?;
        }
        w.flush()?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn json<V: Serialize>(&mut self, name: &str, value: &V) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        std::fs::write(self.dir.join(name), bytes)?;
        self.written.push(name.to_string());
        Ok(())
    }

    /// Writes `report_<kind>.json` describing this invocation.
    pub fn finish(self, kind: &str, cfg: &RunConfig, started: std::time::Instant) -> Result<Vec<String>> {
        let report = ExperimentReport {
            kind,
            version: env!("CARGO_PKG_VERSION"),
            config_digest: self.digest.clone(),
            config: cfg,
            payloads: self.written.clone(),
            wall_clock_secs: started.elapsed().as_secs_f64(),
        };
        std::fs::write(self.dir.join(format!("report_{kind}.json")), serde_json::to_vec_pretty(&report)?)?;
        Ok(self.written)
    }
}
