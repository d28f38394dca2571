//! Report rows and their CSV/JSON serialization.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::stats::Estimate;

/// Multiplier of the standard error granted as statistical slack.
pub const SLACK: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment: String,
    pub quantity: String,
    pub value: f64,
    pub stderr: f64,
    pub bound: Option<f64>,
}

impl ReportRow {
    pub fn value(experiment: &str, quantity: impl Into<String>, value: f64) -> Self {
        ReportRow {
            experiment: experiment.to_string(),
            quantity: quantity.into(),
            value,
            stderr: 0.0,
            bound: None,
        }
    }

    pub fn estimate(experiment: &str, quantity: impl Into<String>, est: &Estimate) -> Self {
        ReportRow {
            stderr: est.stderr,
            ..Self::value(experiment, quantity, est.mean)
        }
    }

    pub fn with_bound(mut self, bound: f64) -> Self {
        self.bound = Some(bound);
        self
    }

    pub fn with_stderr(mut self, stderr: f64) -> Self {
        self.stderr = stderr;
        self
    }

    /// `value ≤ bound + 3·stderr`; `None` when there is no bound.
    pub fn pass(&self) -> Option<bool> {
        self.bound.map(|b| self.value <= b + SLACK * self.stderr)
    }
}

/// A per-kind table with a fixed header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detail {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Detail {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Detail {
            name: name.to_string(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }
}

/// Seventeen significant digits, enough for an exact round trip.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub id: String,
    pub kind: String,
    pub seed: u64,
    pub field: Option<String>,
    pub rows: Vec<ReportRow>,
    pub details: Vec<Detail>,
    /// Free-form notes such as warnings from the modules.
    pub notes: Vec<String>,
}

#[derive(Serialize)]
struct Summary<'a> {
    id: &'a str,
    kind: &'a str,
    seed: u64,
    field: Option<&'a str>,
    passed: bool,
    checked: usize,
    failures: Vec<&'a str>,
    notes: &'a [String],
    files: Vec<String>,
}

impl Report {
    pub fn new(id: &str, kind: &str, seed: u64, field: Option<String>) -> Self {
        Report {
            id: id.to_string(),
            kind: kind.to_string(),
            seed,
            field,
            rows: Vec::new(),
            details: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn push(&mut self, row: ReportRow) {
        self.rows.push(row);
    }

    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.pass() != Some(false))
    }

    pub fn failures(&self) -> Vec<&ReportRow> {
        self.rows.iter().filter(|r| r.pass() == Some(false)).collect()
    }

    pub fn rows_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["experiment", "quantity", "value", "stderr", "bound", "pass"])?;
        for r in &self.rows {
            w.write_record([
                r.experiment.clone(),
                r.quantity.clone(),
                fmt_float(r.value),
                fmt_float(r.stderr),
                r.bound.map(fmt_float).unwrap_or_default(),
                r.pass().map(|p| p.to_string()).unwrap_or_default(),
            ])?;
        }
        Ok(w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?)
    }

    pub fn detail_csv(detail: &Detail) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&detail.header)?;
        for r in &detail.rows {
            w.write_record(r)?;
        }
        Ok(w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?)
    }

    /// Write `<id>.csv`, one `<id>_<detail>.csv` per detail table and
    /// `<id>.json`; returns the paths in that order.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut files = Vec::new();
        let main = dir.join(format!("{}.csv", self.id));
        std::fs::write(&main, self.rows_csv()?)?;
        files.push(main);
        for d in &self.details {
            let p = dir.join(format!("{}_{}.csv", self.id, d.name));
            std::fs::write(&p, Self::detail_csv(d)?)?;
            files.push(p);
        }
        let summary = Summary {
            id: &self.id,
            kind: &self.kind,
            seed: self.seed,
            field: self.field.as_deref(),
            passed: self.passed(),
            checked: self.rows.iter().filter(|r| r.bound.is_some()).count(),
            failures: self.failures().iter().map(|r| r.quantity.as_str()).collect(),
            notes: &self.notes,
            files: files
                .iter()
                .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
                .collect(),
        };
        let json = dir.join(format!("{}.json", self.id));
        std::fs::write(&json, serde_json::to_vec_pretty(&summary)?)?;
        files.push(json);
        Ok(files)
    }
}
