//! Trace files: CSV rows plus a JSON header sidecar.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ClipSection, RunConfigFile};
use crate::diagnostics::{ConstantsReport, TraceRecord};
use crate::solvers::SolverKind;
use crate::{Error, Result};

pub const TRACE_FORMAT: &str = "pl-bilevel-trace";
pub const TRACE_VERSION: u32 = 1;

/// Column order of the CSV body. Changing it breaks every reader.
pub const COLUMNS: [&str; 10] = [
    "t",
    "eta",
    "grad_map_norm",
    "true_grad_norm",
    "hyper_err",
    "f_val",
    "g_gap",
    "lyapunov",
    "samples_used",
    "wall_nanos",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceStatus {
    Completed,
    /// Stopped at the first non-finite iterate; rows end before it.
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceHeader {
    pub format: String,
    pub version: u32,
    pub solver: SolverKind,
    pub seed: u64,
    /// Resolved config; running it again reproduces the rows.
    pub config: RunConfigFile,
    /// Clip spec the run used (configured or derived).
    pub clip: ClipSection,
    pub constants: Option<ConstantsReport>,
    pub warnings: Vec<String>,
    /// Samples drawn to initialize the stochastic estimators.
    pub init_samples: u64,
    /// Full-batch oracle evaluations (MGBiO: two per step).
    pub full_batch_evals: u64,
    /// Uniformly drawn output iterate index in `1..=T`.
    pub output_index: u64,
    pub output_x: Vec<f64>,
    pub status: TraceStatus,
    /// Iteration at which a non-finite value appeared.
    pub failed_at: Option<u64>,
    pub columns: Vec<String>,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFile {
    pub header: TraceHeader,
    pub rows: Vec<TraceRecord>,
}

/// `run.csv` → `run.header.json`.
pub fn header_path(csv: &Path) -> PathBuf {
    csv.with_extension("header.json")
}

fn float(out: &mut String, v: f64) {
    // 17 significant digits reproduce every f64 exactly.
    let _ = write!(out, "{v:.16e}");
}

fn opt_float(out: &mut String, v: Option<f64>) {
    if let Some(v) = v {
        float(out, v);
    }
}

/// CSV body of a trace.
pub fn trace_csv(rows: &[TraceRecord]) -> String {
    let mut out = COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},", r.t);
        float(&mut out, r.eta);
        out.push(',');
        float(&mut out, r.grad_map_norm);
        out.push(',');
        opt_float(&mut out, r.true_grad_norm);
        out.push(',');
        opt_float(&mut out, r.hyper_err);
        out.push(',');
        float(&mut out, r.f_val);
        out.push(',');
        opt_float(&mut out, r.g_gap);
        out.push(',');
        opt_float(&mut out, r.lyapunov);
        let _ = write!(out, ",{},", r.samples_used);
        if let Some(w) = r.wall_nanos {
            let _ = write!(out, "{w}");
        }
        out.push('\n');
    }
    out
}

fn check_writable(trace: &TraceFile) -> Result<()> {
    if trace.rows.is_empty() {
        return Err(Error::invalid("refusing to write an empty trace"));
    }
    if trace.header.rows != trace.rows.len() {
        return Err(Error::invalid(format!(
            "header announces {} rows but the trace has {}",
            trace.header.rows,
            trace.rows.len()
        )));
    }
    if trace.rows.windows(2).any(|w| w[1].t <= w[0].t) {
        return Err(Error::invalid("trace rows must have strictly increasing t"));
    }
    Ok(())
}

/// Writes the CSV body to `path` and the header to [`header_path`].
pub fn write_trace(path: &Path, trace: &TraceFile) -> Result<()> {
    check_writable(trace)?;
    fs::write(path, trace_csv(&trace.rows))?;
    let mut header = serde_json::to_string_pretty(&trace.header)?;
    header.push('\n');
    fs::write(header_path(path), header)?;
    Ok(())
}

/// Writes header and rows as a single JSON document.
pub fn write_trace_json(path: &Path, trace: &TraceFile) -> Result<()> {
    check_writable(trace)?;
    let mut text = serde_json::to_string_pretty(trace)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn parse_field<T: std::str::FromStr>(field: &str, row: usize, col: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::Parse(format!("row {row}: column {col} holds `{field}`")))
}

fn parse_opt<T: std::str::FromStr>(field: &str, row: usize, col: &str) -> Result<Option<T>> {
    if field.is_empty() {
        Ok(None)
    } else {
        parse_field(field, row, col).map(Some)
    }
}

/// Parses a CSV body; row numbers in errors count the header as row 1.
pub fn parse_trace_csv(text: &str) -> Result<Vec<TraceRecord>> {
    let mut lines = text.lines();
    let head = lines.next().ok_or_else(|| Error::Parse("trace CSV is empty".into()))?;
    if head != COLUMNS.join(",") {
        return Err(Error::Parse(format!("row 1: unexpected header `{head}`")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 2;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != COLUMNS.len() {
            return Err(Error::Parse(format!(
                "row {row}: expected {} fields, found {}",
                COLUMNS.len(),
                fields.len()
            )));
        }
        rows.push(TraceRecord {
            t: parse_field(fields[0], row, COLUMNS[0])?,
            eta: parse_field(fields[1], row, COLUMNS[1])?,
            grad_map_norm: parse_field(fields[2], row, COLUMNS[2])?,
            true_grad_norm: parse_opt(fields[3], row, COLUMNS[3])?,
            hyper_err: parse_opt(fields[4], row, COLUMNS[4])?,
            f_val: parse_field(fields[5], row, COLUMNS[5])?,
            g_gap: parse_opt(fields[6], row, COLUMNS[6])?,
            lyapunov: parse_opt(fields[7], row, COLUMNS[7])?,
            samples_used: parse_field(fields[8], row, COLUMNS[8])?,
            wall_nanos: parse_opt(fields[9], row, COLUMNS[9])?,
        });
    }
    Ok(rows)
}

/// Reads a trace written by [`write_trace`] or [`write_trace_json`]
/// (recognized by a `.json` extension).
pub fn read_trace(path: &Path) -> Result<TraceFile> {
    if path.extension().is_some_and(|e| e == "json") {
        let text = fs::read_to_string(path)?;
        let trace: TraceFile =
            serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        return Ok(trace);
    }
    let rows = parse_trace_csv(&fs::read_to_string(path)?)?;
    let header_text = fs::read_to_string(header_path(path))?;
    let header: TraceHeader = serde_json::from_str(&header_text)
        .map_err(|e| Error::Parse(format!("{}: {e}", header_path(path).display())))?;
    if header.rows != rows.len() {
        return Err(Error::Parse(format!(
            "header announces {} rows, CSV holds {}",
            header.rows,
            rows.len()
        )));
    }
    Ok(TraceFile { header, rows })
}

/// Reads only the CSV rows, without requiring a header.
pub fn read_trace_rows(path: &Path) -> Result<Vec<TraceRecord>> {
    if path.extension().is_some_and(|e| e == "json") {
        return read_trace(path).map(|t| t.rows);
    }
    parse_trace_csv(&fs::read_to_string(path)?)
}
