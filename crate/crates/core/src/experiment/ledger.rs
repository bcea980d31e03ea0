//! JSON-lines run ledger, one record per cell, rewritten atomically.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::SCHEMA_VERSION;
use crate::error::{Error, IoContext, Result};
use crate::trainers::EpochMetrics;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    /// Student distilled from a teacher (self-distillation when equal).
    Distill,
    /// Student architecture trained supervised on the labeled subset.
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellId {
    pub kind: CellKind,
    pub teacher: String,
    pub student: String,
    pub fraction: f64,
    pub seed: u64,
}

impl CellId {
    /// Stable textual key, also used as the cell's directory name.
    pub fn key(&self) -> String {
        match self.kind {
            CellKind::Distill => format!("{}__{}__f{}__s{}", self.teacher, self.student, self.fraction, self.seed),
            CellKind::Baseline => format!("baseline__{}__f{}__s{}", self.student, self.fraction, self.seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Artifacts {
    pub split_manifest: Option<PathBuf>,
    pub teacher_checkpoint: Option<PathBuf>,
    pub soft_labels: Option<PathBuf>,
    pub student_checkpoint: Option<PathBuf>,
}

/// Metrics of a completed cell. For baselines both sides describe the same
/// supervised model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub teacher_history: Vec<EpochMetrics>,
    pub student_history: Vec<EpochMetrics>,
    pub teacher_val: f64,
    pub student_val: f64,
    pub teacher_train: f64,
    pub student_train: f64,
    pub overfit_gap_teacher: f64,
    pub overfit_gap_student: f64,
    pub pct_increase: f64,
    pub teacher_params: usize,
    pub student_params: usize,
    pub teacher_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub cell_id: CellId,
    pub status: Status,
    #[serde(default)]
    pub error: Option<String>,
    /// Hash of every input of the cell; equal hashes mean a re-run is a no-op.
    pub config_hash: String,
    #[serde(default)]
    pub artifacts: Artifacts,
    #[serde(flatten)]
    pub result: Option<CellResult>,
}

impl RunRecord {
    pub fn key(&self) -> String {
        self.cell_id.key()
    }
}

/// Parses a ledger file, rejecting other schema versions.
pub fn read_ledger(path: &Path) -> Result<Vec<RunRecord>> {
    let text = fs::read_to_string(path).at(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let value: serde_json::Value = serde_json::from_str(line)?;
        let version = value.get("schema_version").and_then(|v| v.as_u64());
        if version != Some(SCHEMA_VERSION as u64) {
            return Err(Error::Format(format!(
                "{} line {}: schema_version {version:?}, expected {SCHEMA_VERSION}",
                path.display(),
                i + 1
            )));
        }
        out.push(serde_json::from_value(value)?);
    }
    Ok(out)
}

/// In-memory ledger mirrored to disk after every upsert.
pub struct Ledger {
    path: PathBuf,
    records: Mutex<Vec<RunRecord>>,
}

impl Ledger {
    /// Opens `path`, loading existing records if the file exists.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let records = if path.exists() { read_ledger(&path)? } else { Vec::new() };
        Ok(Self {
            path,
            records: Mutex::new(records),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn get(&self, key: &str) -> Option<RunRecord> {
        self.records.lock().expect("ledger lock").iter().find(|r| r.key() == key).cloned()
    }

    pub fn records(&self) -> Vec<RunRecord> {
        self.records.lock().expect("ledger lock").clone()
    }

    /// Replaces the record with the same cell key (or appends) and rewrites
    /// the file via a temporary sibling and a rename.
    pub fn upsert(&self, record: RunRecord) -> Result<()> {
        let mut records = self.records.lock().expect("ledger lock");
        match records.iter_mut().find(|r| r.key() == record.key()) {
            Some(slot) => *slot = record,
            None => records.push(record),
        }
        let mut text = String::new();
        for r in records.iter() {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).at(dir)?;
        }
        let tmp = self.path.with_extension("jsonl.tmp");
        fs::write(&tmp, text).at(&tmp)?;
        fs::rename(&tmp, &self.path).at(&self.path)
    }
}
