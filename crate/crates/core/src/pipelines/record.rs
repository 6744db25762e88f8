//! On-disk run records: config, JSON report and CSV tables.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::linear_suite::Check;
use crate::error::Result;
use crate::io::Table;

#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub command: String,
    /// Effective configuration in `key = value` form.
    pub config_text: String,
    pub seed: u64,
    /// SHA-256 of the input data, when a dataset was loaded.
    pub data_hash: Option<String>,
    pub checks: Vec<Check>,
    pub report: serde_json::Value,
    #[serde(skip)]
    pub tables: Vec<(String, Table)>,
}

impl RunRecord {
    pub fn new(command: &str, config_text: String, seed: u64) -> Self {
        Self {
            command: command.into(),
            config_text,
            seed,
            data_hash: None,
            checks: Vec::new(),
            report: serde_json::Value::Null,
            tables: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// Writes `config.txt`, `report.json` and one CSV per table; returns the
    /// paths written.
    pub fn write_dir(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let cfg = dir.join("config.txt");
        fs::write(&cfg, &self.config_text)?;
        written.push(cfg);
        let report = dir.join("report.json");
        let json = serde_json::to_string_pretty(self)?;
        fs::write(&report, json + "\n")?;
        written.push(report);
        for (name, t) in &self.tables {
            let p = dir.join(format!("{name}.csv"));
            t.save(&p)?;
            written.push(p);
        }
        Ok(written)
    }
}
