//! CSV emission for training metrics, sweep results and subspace traces.
//!
//! Floats are written with 17 significant digits, enough for any `f64` to
//! parse back to the identical bit pattern.

use std::path::Path;

use crate::error::{Error, Result};
use crate::experiments::{CellStatus, SubspaceTrace, SweepRow};
use crate::training::MetricRow;

pub const METRICS_HEADER: [&str; 5] = ["step", "split", "loss", "lr", "mean_mask_popcount"];

pub const SWEEP_HEADER: [&str; 10] = [
    "method",
    "rank",
    "pruning_rate",
    "repeat",
    "seed",
    "final_train_loss",
    "final_eval_loss",
    "steps",
    "wall_seconds",
    "status",
];

pub const TRACE_HEADER: [&str; 5] = ["from_step", "to_step", "angle_index", "angle", "status"];

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn parse_f64(s: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::contract(format!("not a float: {s:?}")))
}

/// Row type with a fixed header.
pub trait CsvRow {
    fn header() -> &'static [&'static str];
    fn fields(&self) -> Vec<String>;
}

impl CsvRow for MetricRow {
    fn header() -> &'static [&'static str] {
        &METRICS_HEADER
    }

    fn fields(&self) -> Vec<String> {
        vec![
            self.step.to_string(),
            self.split.name().to_string(),
            fmt_f64(self.loss),
            fmt_f64(self.lr),
            fmt_f64(self.mean_mask_popcount),
        ]
    }
}

impl CsvRow for SweepRow {
    fn header() -> &'static [&'static str] {
        &SWEEP_HEADER
    }

    fn fields(&self) -> Vec<String> {
        let status = match &self.status {
            CellStatus::Ok => "ok".to_string(),
            CellStatus::Failed(msg) => format!("failed: {msg}"),
        };
        vec![
            self.cell.method.name().to_string(),
            self.cell.rank.to_string(),
            fmt_f64(self.cell.pruning_rate),
            self.cell.repeat.to_string(),
            self.cell.seed.to_string(),
            fmt_f64(self.final_train_loss),
            fmt_f64(self.final_eval_loss),
            self.steps.to_string(),
            fmt_f64(self.wall_seconds),
            status,
        ]
    }
}

/// In-memory CSV builder that rejects rows not matching its header.
pub struct CsvWriter {
    inner: csv::Writer<Vec<u8>>,
    width: usize,
}

impl CsvWriter {
    pub fn new(header: &[&str]) -> Result<Self> {
        let mut inner = csv::WriterBuilder::new().from_writer(Vec::new());
        inner.write_record(header)?;
        Ok(Self {
            inner,
            width: header.len(),
        })
    }

    pub fn write(&mut self, fields: &[String]) -> Result<()> {
        if fields.len() != self.width {
            return Err(Error::contract(format!(
                "row has {} fields, schema has {}",
                fields.len(),
                self.width
            )));
        }
        self.inner.write_record(fields)?;
        Ok(())
    }

    pub fn into_bytes(self) -> Result<Vec<u8>> {
        self.inner
            .into_inner()
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }
}

pub fn render<R: CsvRow>(rows: &[R]) -> Result<Vec<u8>> {
    let mut w = CsvWriter::new(R::header())?;
    for row in rows {
        w.write(&row.fields())?;
    }
    w.into_bytes()
}

/// Writes `rows` under their header; an empty slice yields a header-only file.
pub fn write_rows<R: CsvRow>(path: &Path, rows: &[R]) -> Result<()> {
    super::atomic_write(path, &render(rows)?)
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    write_rows(path, rows)
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    write_rows(path, rows)
}

/// One row per principal angle; an interval with an undefined subspace gets
/// a single `missing` row.
pub fn render_trace(trace: &SubspaceTrace) -> Result<Vec<u8>> {
    let mut w = CsvWriter::new(&TRACE_HEADER)?;
    for (i, angles) in trace.angles.iter().enumerate() {
        let (from, to) = (trace.steps[i].to_string(), trace.steps[i + 1].to_string());
        match angles {
            Some(angles) => {
                for (k, a) in angles.iter().enumerate() {
                    w.write(&[
                        from.clone(),
                        to.clone(),
                        k.to_string(),
                        fmt_f64(*a),
                        "ok".into(),
                    ])?;
                }
            }
            None => w.write(&[from, to, String::new(), String::new(), "missing".into()])?,
        }
    }
    w.into_bytes()
}

pub fn write_trace(path: &Path, trace: &SubspaceTrace) -> Result<()> {
    super::atomic_write(path, &render_trace(trace)?)
}

/// Reads a CSV into its header and string records.
pub fn read(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<std::result::Result<_, _>>()?;
    Ok((header, rows))
}
