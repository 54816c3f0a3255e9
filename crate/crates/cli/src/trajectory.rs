//! Per-step trajectory CSV and the run summary.
//!
//! Numbers are written in Rust's shortest round-trip form, so reading a file
//! back and writing it again reproduces it byte for byte.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use autolambda_core::metrics::MetricTable;
use autolambda_core::train::StepRecord;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub fn header(task_names: &[String]) -> Vec<String> {
    let mut h = vec!["step".to_string()];
    for prefix in ["lambda", "train_loss", "val_loss"] {
        h.extend(task_names.iter().map(|n| format!("{prefix}_{n}")));
    }
    h
}

fn row(r: &StepRecord) -> Vec<String> {
    let mut cells = vec![r.step.to_string()];
    cells.extend(r.lambda.iter().map(f64::to_string));
    cells.extend(r.train_loss.iter().map(f64::to_string));
    cells.extend(r.val_loss.iter().map(|v| v.map(|v| v.to_string()).unwrap_or_default()));
    cells
}

/// Streams step records to a CSV file, flushing every `flush_every` rows.
pub struct TrajectoryWriter {
    path: PathBuf,
    out: csv::Writer<BufWriter<File>>,
    flush_every: usize,
    pending: usize,
    columns: usize,
}

impl TrajectoryWriter {
    pub fn create(path: &Path, task_names: &[String], flush_every: usize) -> Result<Self, CliError> {
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        let mut out = csv::Writer::from_writer(BufWriter::new(file));
        let h = header(task_names);
        let columns = h.len();
        out.write_record(&h).map_err(|e| csv_to_io(path, e))?;
        let mut w = Self {
            path: path.to_path_buf(),
            out,
            flush_every: flush_every.max(1),
            pending: 0,
            columns,
        };
        w.flush()?;
        Ok(w)
    }

    pub fn write(&mut self, record: &StepRecord) -> Result<(), CliError> {
        let cells = row(record);
        debug_assert_eq!(cells.len(), self.columns);
        self.out.write_record(&cells).map_err(|e| csv_to_io(&self.path, e))?;
        self.pending += 1;
        if self.pending >= self.flush_every {
            self.flush()?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), CliError> {
        self.pending = 0;
        self.out.flush().map_err(|e| CliError::io(&self.path, e))
    }
}

fn csv_to_io(path: &Path, e: csv::Error) -> CliError {
    CliError::Csv {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Writes a whole trajectory at once.
pub fn emit_trajectory(records: &[StepRecord], task_names: &[String], path: &Path) -> Result<(), CliError> {
    let mut w = TrajectoryWriter::create(path, task_names, usize::MAX)?;
    for r in records {
        w.write(r)?;
    }
    w.flush()
}

/// Reads a trajectory back into task names and step records.
pub fn read_trajectory(path: &Path) -> Result<(Vec<String>, Vec<StepRecord>), CliError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_to_io(path, e))?;
    let h: Vec<String> = reader
        .headers()
        .map_err(|e| csv_to_io(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let bad = |m: String| CliError::Check(format!("{}: {m}", path.display()));
    if h.first().map(String::as_str) != Some("step") || (h.len() - 1) % 3 != 0 {
        return Err(bad("not a trajectory header".into()));
    }
    let k = (h.len() - 1) / 3;
    let names: Vec<String> = h[1..=k]
        .iter()
        .map(|c| c.strip_prefix("lambda_").map(str::to_string).ok_or_else(|| bad(format!("bad column {c}"))))
        .collect::<Result<_, _>>()?;
    if header(&names) != h {
        return Err(bad("columns are not in trajectory order".into()));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number {s:?}")));
    let mut records = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_to_io(path, e))?;
        let cells: Vec<&str> = rec.iter().collect();
        records.push(StepRecord {
            step: cells[0].parse().map_err(|_| bad(format!("bad step {:?}", cells[0])))?,
            lambda: cells[1..=k].iter().map(|c| num(c)).collect::<Result<_, _>>()?,
            train_loss: cells[k + 1..=2 * k].iter().map(|c| num(c)).collect::<Result<_, _>>()?,
            val_loss: cells[2 * k + 1..]
                .iter()
                .map(|c| if c.is_empty() { Ok(None) } else { num(c).map(Some) })
                .collect::<Result<_, _>>()?,
        });
    }
    Ok((names, records))
}

/// Outcome of one training run as written to `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub strategy: String,
    pub config_hash: String,
    /// `ok` or `diverged`.
    pub status: String,
    pub steps_completed: usize,
    pub wall_clock_secs: f64,
    pub task_names: Vec<String>,
    pub final_weights: Vec<f64>,
    pub metrics: Option<MetricTable>,
    pub val_losses: Vec<f64>,
    pub test_losses: Vec<f64>,
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("summary serializes");
    let mut f = File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(text.as_bytes())
        .and_then(|_| f.write_all(b"\n"))
        .map_err(|e| CliError::io(path, e))
}
