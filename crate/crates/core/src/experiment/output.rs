//! Result records and their CSV and JSON encodings.
//!
//! Every CSV file starts with `# config_sha256=<hex> seed=<u64>` followed by a header
//! row. Floats are written in scientific notation with 17 significant digits;
//! missing values are empty fields.
//!
//! - `records.csv`: `sigma_w_sq,horizon,tau,method,lambda,replicate,squared_error,error`,
//!   one row per replicate, method and setting.
//! - `differences.csv`: `sigma_w_sq,horizon,first,second,replicate,difference`, the
//!   per-replicate squared error of `first` minus that of `second`.
//! - `summary.csv`: `sigma_w_sq,horizon,tau,method,lambda,n_ok,n_failed,mse,p20,p50,p80,analytic`.
//! - `summary.json`: [`Summary`].
//! - `failures.json`: the failed records, written only when some replicate failed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::runner::BenchmarkOutput;
use crate::error::{Error, Result};

/// Squared error of one method on one replicate of one setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub sigma_w_sq: f64,
    pub horizon: usize,
    pub tau: usize,
    pub method: String,
    pub lambda: Option<f64>,
    pub replicate: u64,
    pub squared_error: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Difference {
    pub sigma_w_sq: f64,
    pub horizon: usize,
    pub first: String,
    pub second: String,
    pub replicate: u64,
    pub difference: f64,
}

/// Aggregate of one method in one setting; `analytic` is the model-predicted MSE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub sigma_w_sq: f64,
    pub horizon: usize,
    pub tau: usize,
    pub method: String,
    pub lambda: Option<f64>,
    pub n_ok: u64,
    pub n_failed: u64,
    pub mse: Option<f64>,
    pub p20: Option<f64>,
    pub p50: Option<f64>,
    pub p80: Option<f64>,
    pub analytic: Option<f64>,
}

/// Head-to-head comparison of two methods on common draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub sigma_w_sq: f64,
    pub horizon: usize,
    pub first: String,
    pub second: String,
    pub n: u64,
    /// Fraction of replicates where `first` has strictly smaller squared error.
    pub first_wins_fraction: Option<f64>,
    pub mean_difference: Option<f64>,
    pub analytic_mean_difference: Option<f64>,
}

/// Outcome of one input design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignRecord {
    pub sigma_w_sq: f64,
    pub horizon: usize,
    pub tau: usize,
    pub j_initial: f64,
    pub j_final: f64,
    pub iterations: usize,
    pub termination: String,
    /// Smallest eigenvalue of the information matrix of the designed batches.
    pub lambda_min_info: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub library_version: String,
    pub benchmark: u8,
    pub seed: u64,
    pub n_reps: u64,
    pub config_sha256: String,
    pub config: ExperimentConfig,
    pub rows: Vec<SummaryRow>,
    pub comparisons: Vec<Comparison>,
    pub designs: Vec<DesignRecord>,
    pub failed_replicates: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Json,
    Both,
}

impl std::str::FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "both" => Ok(Self::Both),
            other => Err(Error::InvalidArgument(format!("unknown format `{other}`, expected csv, json or both"))),
        }
    }
}

/// `{:.16e}`, the fixed float format of every CSV file.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt_float(v: Option<f64>) -> String {
    v.map(format_float).unwrap_or_default()
}

/// A CSV document with the provenance line and `header` already written.
pub struct CsvTable {
    writer: csv::Writer<Vec<u8>>,
}

impl CsvTable {
    pub fn new(config_sha256: &str, seed: u64, header: &[&str]) -> Result<Self> {
        let mut buf = Vec::new();
        buf.extend_from_slice(format!("# config_sha256={config_sha256} seed={seed}\n").as_bytes());
        let mut writer = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(buf);
        writer.write_record(header).map_err(csv_error)?;
        Ok(Self { writer })
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.writer.write_record(fields).map_err(csv_error)
    }

    pub fn into_bytes(self) -> Result<Vec<u8>> {
        self.writer.into_inner().map_err(|e| Error::InvalidArgument(format!("csv flush failed: {e}")))
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("csv encoding failed: {e}"))
}

pub fn records_csv(summary: &Summary, records: &[Record]) -> Result<Vec<u8>> {
    let mut t = CsvTable::new(
        &summary.config_sha256,
        summary.seed,
        &["sigma_w_sq", "horizon", "tau", "method", "lambda", "replicate", "squared_error", "error"],
    )?;
    for r in records {
        t.row([
            format_float(r.sigma_w_sq),
            r.horizon.to_string(),
            r.tau.to_string(),
            r.method.clone(),
            opt_float(r.lambda),
            r.replicate.to_string(),
            opt_float(r.squared_error),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    t.into_bytes()
}

pub fn differences_csv(summary: &Summary, diffs: &[Difference]) -> Result<Vec<u8>> {
    let mut t = CsvTable::new(
        &summary.config_sha256,
        summary.seed,
        &["sigma_w_sq", "horizon", "first", "second", "replicate", "difference"],
    )?;
    for d in diffs {
        t.row([
            format_float(d.sigma_w_sq),
            d.horizon.to_string(),
            d.first.clone(),
            d.second.clone(),
            d.replicate.to_string(),
            format_float(d.difference),
        ])?;
    }
    t.into_bytes()
}

pub fn summary_csv(summary: &Summary) -> Result<Vec<u8>> {
    let mut t = CsvTable::new(
        &summary.config_sha256,
        summary.seed,
        &["sigma_w_sq", "horizon", "tau", "method", "lambda", "n_ok", "n_failed", "mse", "p20", "p50", "p80", "analytic"],
    )?;
    for r in &summary.rows {
        t.row([
            format_float(r.sigma_w_sq),
            r.horizon.to_string(),
            r.tau.to_string(),
            r.method.clone(),
            opt_float(r.lambda),
            r.n_ok.to_string(),
            r.n_failed.to_string(),
            opt_float(r.mse),
            opt_float(r.p20),
            opt_float(r.p50),
            opt_float(r.p80),
            opt_float(r.analytic),
        ])?;
    }
    t.into_bytes()
}

pub fn summary_json(summary: &Summary) -> Result<String> {
    Ok(serde_json::to_string_pretty(summary)?)
}

pub fn parse_summary_json(text: &str) -> Result<Summary> {
    Ok(serde_json::from_str(text)?)
}

fn write(dir: &Path, name: &str, bytes: &[u8], written: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, bytes)?;
    written.push(path);
    Ok(())
}

/// Writes the benchmark files into `dir`, creating it if needed; returns the paths written.
pub fn emit_results(output: &BenchmarkOutput, dir: &Path, format: OutputFormat) -> Result<Vec<PathBuf>> {
    if output.records.is_empty() {
        return Err(Error::InvalidArgument("no records to emit".into()));
    }
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let summary = &output.summary;
    if matches!(format, OutputFormat::Csv | OutputFormat::Both) {
        write(dir, "records.csv", &records_csv(summary, &output.records)?, &mut written)?;
        write(dir, "summary.csv", &summary_csv(summary)?, &mut written)?;
        if !output.differences.is_empty() {
            write(dir, "differences.csv", &differences_csv(summary, &output.differences)?, &mut written)?;
        }
    }
    if matches!(format, OutputFormat::Json | OutputFormat::Both) {
        write(dir, "summary.json", summary_json(summary)?.as_bytes(), &mut written)?;
    }
    let failures = output.failures();
    if !failures.is_empty() {
        let manifest = serde_json::json!({
            "config_sha256": summary.config_sha256,
            "seed": summary.seed,
            "failed_replicates": summary.failed_replicates,
            "failures": failures,
        });
        write(dir, "failures.json", serde_json::to_string_pretty(&manifest)?.as_bytes(), &mut written)?;
    }
    Ok(written)
}
