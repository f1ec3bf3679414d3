use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rsmfg_core::{DMatrix, MatrixTrajectory};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{hex, ExperimentConfig, Mode};
use crate::error::{CliError, Result};

pub const TRAJECTORY_HEADER: [&str; 4] = ["time [problem units]", "entity", "component", "value [dimensionless]"];

/// One CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Self { name: name.to_string(), header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    /// Long-format trajectory table.
    pub fn trajectories(name: &str) -> Self {
        Self::new(name, &TRAJECTORY_HEADER)
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Appends every entry of a matrix trajectory; components are `i_j` (1-based),
    /// or `i` for column vectors.
    pub fn push_trajectory(&mut self, entity: &str, prefix: &str, tr: &MatrixTrajectory) {
        for (i, m) in tr.values().iter().enumerate() {
            self.push_matrix(tr.grid().node(i), entity, prefix, m);
        }
    }

    pub fn push_matrix(&mut self, t: f64, entity: &str, prefix: &str, m: &DMatrix<f64>) {
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                let comp = if m.ncols() == 1 { format!("{prefix}{}", r + 1) } else { format!("{prefix}{}_{}", r + 1, c + 1) };
                self.push(vec![num(t), entity.to_string(), comp, num(m[(r, c)])]);
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for row in &self.rows {
            w.write_record(row).expect("in-memory write");
        }
        w.into_inner().expect("in-memory write")
    }
}

/// Shortest representation that reads back to the same `f64`.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}

/// Tables and summary values produced by one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Bundle {
    pub tables: Vec<Table>,
    pub summary: BTreeMap<String, Value>,
}

impl Bundle {
    pub fn note(&mut self, key: &str, value: impl Into<Value>) {
        self.summary.insert(key.to_string(), value.into());
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    /// Manifest JSON: config echo, content hash, versions, file digests and summary.
    pub fn manifest(&self, mode: Mode, config: &ExperimentConfig, status: &str) -> Value {
        let files: Vec<Value> = self
            .tables
            .iter()
            .map(|t| {
                let bytes = t.to_bytes();
                json!({"name": t.name, "rows": t.len(), "sha256": hex(&Sha256::digest(&bytes))})
            })
            .collect();
        json!({
            "tool": "rsmfg",
            "versions": {"rsmfg": env!("CARGO_PKG_VERSION"), "rsmfg-core": rsmfg_core::VERSION},
            "mode": mode.name(),
            "status": status,
            "config_hash": config.hash,
            "config": config.echo,
            "files": files,
            "units": {"time": "problem units", "states": "dimensionless", "log costs": "dimensionless"},
            "summary": self.summary,
        })
    }

    /// Writes every table and `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path, mode: Mode, config: &ExperimentConfig, status: &str) -> Result<()> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| CliError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        for t in &self.tables {
            let path = dir.join(&t.name);
            fs::write(&path, t.to_bytes()).map_err(io(&path))?;
        }
        let path = dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(&self.manifest(mode, config, status)).expect("serializable");
        text.push('\n');
        fs::write(&path, text).map_err(io(&path))
    }
}
