//! Evaluation and ablation reports plus the per-sample prediction log.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use trinity_core::data::Label;

use crate::error::{CliError, CliResult};

pub const EVAL_FORMAT: &str = "trinity-eval-v1";
pub const ABLATION_FORMAT: &str = "trinity-ablation-v1";

/// Content-addressed pointer to an input file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRef {
    pub file_name: String,
    pub sha256: String,
}

impl FileRef {
    pub fn of(path: &Path) -> CliResult<Self> {
        let bytes = fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        Ok(Self {
            file_name: path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            sha256: sha256_hex(&bytes),
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub perturbation: String,
    pub n_correct: usize,
    pub n_total: usize,
    pub acc: f64,
}

impl Cell {
    pub fn new(perturbation: impl Into<String>, n_correct: usize, n_total: usize) -> Self {
        let acc = if n_total == 0 { 0.0 } else { n_correct as f64 / n_total as f64 };
        Self {
            perturbation: perturbation.into(),
            n_correct,
            n_total,
            acc,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub manifest: FileRef,
    pub cells: Vec<Cell>,
}

/// One line of `predictions.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub dataset: String,
    pub perturbation: String,
    pub index: usize,
    pub image_path: String,
    pub label: Label,
    pub predicted: Label,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub timestamp: String,
    pub checkpoint: FileRef,
    /// Model config, ablation flags and evaluation grid.
    pub config: serde_json::Value,
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn cell(&self, dataset: &str, perturbation: &str) -> Option<&Cell> {
        self.rows
            .iter()
            .find(|r| r.dataset == dataset)?
            .cells
            .iter()
            .find(|c| c.perturbation == perturbation)
    }

    /// `dataset,<column>...` with one ACC per cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&csv_field(&row.dataset));
            for c in &row.cells {
                let _ = write!(out, ",{}", c.acc);
            }
            out.push('\n');
        }
        out
    }

    /// Checks ACC = n_correct / n_total and that the grid is complete.
    pub fn validate(&self) -> CliResult<()> {
        for row in &self.rows {
            let names: Vec<&str> = row.cells.iter().map(|c| c.perturbation.as_str()).collect();
            if names != self.columns.iter().map(String::as_str).collect::<Vec<_>>() {
                return Err(CliError::Runtime(format!("row {} does not cover the grid", row.dataset)));
            }
            for c in &row.cells {
                if c.n_total == 0 || c.acc != c.n_correct as f64 / c.n_total as f64 {
                    return Err(CliError::Runtime(format!("inconsistent cell {}/{}", row.dataset, c.perturbation)));
                }
            }
        }
        Ok(())
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// `(n_correct, n_total)` per `(dataset, perturbation)` from the log.
pub fn recount(records: &[PredictionRecord]) -> BTreeMap<(String, String), (usize, usize)> {
    let mut out: BTreeMap<(String, String), (usize, usize)> = BTreeMap::new();
    for r in records {
        let e = out.entry((r.dataset.clone(), r.perturbation.clone())).or_default();
        e.1 += 1;
        if r.predicted == r.label {
            e.0 += 1;
        }
    }
    out
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> CliResult<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).map_err(|e| CliError::Runtime(e.to_string()))?);
        text.push('\n');
    }
    write_file(path, text.as_bytes())
}

pub fn read_predictions(path: &Path) -> CliResult<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| CliError::Data(format!("{}: {e}", path.display()))))
        .collect()
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::Runtime(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub flags: trinity_core::fusion::AblationFlags,
    pub checkpoint: FileRef,
    /// One ACC per evaluation dataset, in column order.
    pub cells: Vec<Cell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub format: String,
    pub timestamp: String,
    pub train_manifest: FileRef,
    /// Model and training config shared by every row.
    pub config: serde_json::Value,
    /// Evaluation dataset tags.
    pub columns: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn acc(&self, name: &str, dataset: &str) -> Option<f64> {
        let col = self.columns.iter().position(|c| c == dataset)?;
        Some(self.rows.iter().find(|r| r.name == name)?.cells.get(col)?.acc)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("config");
        for c in &self.columns {
            out.push(',');
            out.push_str(&csv_field(c));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.name);
            for c in &row.cells {
                let _ = write!(out, ",{}", c.acc);
            }
            out.push('\n');
        }
        out
    }
}
