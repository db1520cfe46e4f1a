//! Per-iteration metrics files.
//!
//! Each run directory holds `metrics.jsonl` (one row per iteration),
//! `metrics.csv` (the same rows, long format) and `summary.json`. Floats are
//! written with 17 significant digits so files replay bit-exactly.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use pirl_core::{Record, RunOutput, SkipReason, Variant};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const METRICS_SCHEMA_VERSION: u32 = 1;
pub const JSONL_FILE: &str = "metrics.jsonl";
pub const CSV_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Column order of schema version 1.
pub const COLUMNS: [&str; 19] = [
    "name",
    "seed",
    "t",
    "mu_t",
    "mu_his",
    "sigma_his",
    "xi",
    "phi_xi",
    "j_exact",
    "grad_norm_explore",
    "grad_norm_verify",
    "k_effective",
    "verify_applied",
    "verify_skip_reason",
    "degenerate_groups",
    "retained_groups",
    "pi_zero_sum_residual",
    "attribution_mass_residual",
    "stability_warning",
];

/// One iteration of one run. Field order is the column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRow {
    pub name: String,
    pub seed: u64,
    pub t: u64,
    pub mu_t: f64,
    pub mu_his: Option<f64>,
    pub sigma_his: Option<f64>,
    pub xi: Option<f64>,
    pub phi_xi: Option<f64>,
    pub j_exact: f64,
    pub grad_norm_explore: f64,
    pub grad_norm_verify: Option<f64>,
    pub k_effective: Option<f64>,
    pub verify_applied: bool,
    pub verify_skip_reason: Option<SkipReason>,
    pub degenerate_groups: usize,
    pub retained_groups: usize,
    pub pi_zero_sum_residual: Option<f64>,
    pub attribution_mass_residual: Option<f64>,
    pub stability_warning: bool,
}

impl MetricsRow {
    pub fn from_record(name: &str, seed: u64, r: &Record) -> Self {
        Self {
            name: name.to_string(),
            seed,
            t: r.t,
            mu_t: r.mu_t,
            mu_his: r.mu_his,
            sigma_his: r.sigma_his,
            xi: r.xi,
            phi_xi: r.phi_xi,
            j_exact: r.j_exact,
            grad_norm_explore: r.grad_norm_explore,
            grad_norm_verify: r.grad_norm_verify,
            k_effective: r.k_effective,
            verify_applied: r.verify_applied,
            verify_skip_reason: r.verify_skip_reason,
            degenerate_groups: r.degenerate_groups,
            retained_groups: r.retained_groups,
            pi_zero_sum_residual: r.pi_zero_sum_residual,
            attribution_mass_residual: r.attribution_mass_residual,
            stability_warning: r.stability_warning,
        }
    }

    fn csv_cells(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(format_f64).unwrap_or_default();
        vec![
            self.name.clone(),
            self.seed.to_string(),
            self.t.to_string(),
            format_f64(self.mu_t),
            opt(self.mu_his),
            opt(self.sigma_his),
            opt(self.xi),
            opt(self.phi_xi),
            format_f64(self.j_exact),
            format_f64(self.grad_norm_explore),
            opt(self.grad_norm_verify),
            opt(self.k_effective),
            self.verify_applied.to_string(),
            self.verify_skip_reason.map(|r| r.to_string()).unwrap_or_default(),
            self.degenerate_groups.to_string(),
            self.retained_groups.to_string(),
            opt(self.pi_zero_sum_residual),
            opt(self.attribution_mass_residual),
            self.stability_warning.to_string(),
        ]
    }
}

/// 17 significant digits in scientific notation.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// JSON formatter that writes every float with 17 significant digits.
#[derive(Debug, Clone, Copy, Default)]
pub struct FullPrecision;

impl serde_json::ser::Formatter for FullPrecision {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        if value.is_finite() {
            write!(writer, "{value:.16e}")
        } else {
            writer.write_all(b"null")
        }
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, f64::from(value))
    }
}

/// Serializes `value` as one line of JSON with full-precision floats.
pub fn to_json_line<S: Serialize>(value: &S) -> String {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FullPrecision);
    value.serialize(&mut ser).expect("metrics types serialize");
    String::from_utf8(buf).expect("JSON is UTF-8")
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| HarnessError::io(path, e))
}

pub fn write_jsonl(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut out = create(path)?;
    for row in rows {
        writeln!(out, "{}", to_json_line(row)).map_err(|e| HarnessError::io(path, e))?;
    }
    out.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn write_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let csv_err = |e: csv::Error| HarnessError::io(path, io::Error::other(e));
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(COLUMNS).map_err(csv_err)?;
    for row in rows {
        w.write_record(row.csv_cells()).map_err(csv_err)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

/// Writes `metrics.jsonl` and `metrics.csv` into `dir`, creating it.
pub fn write_metrics(rows: &[MetricsRow], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    write_jsonl(rows, &dir.join(JSONL_FILE))?;
    write_csv(rows, &dir.join(CSV_FILE))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricsRow>> {
    let file = File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| HarnessError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).map_err(|e| HarnessError::Format {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", i + 1),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

/// Per-run aggregate written next to the metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub name: String,
    pub variant: Variant,
    pub seed: u64,
    pub iterations: usize,
    pub initial_j: f64,
    pub final_j: f64,
    pub max_grad_norm_explore: f64,
    pub mean_grad_norm_explore: f64,
    pub verify_steps: usize,
    pub zero_variance_skips: usize,
    pub stability_warnings: usize,
    pub max_pi_zero_sum_residual: f64,
    pub max_attribution_mass_residual: f64,
}

impl RunSummary {
    pub fn new(name: &str, variant: Variant, seed: u64, out: &RunOutput<f64>) -> Self {
        let r = &out.records;
        let n = r.len().max(1) as f64;
        let max_of = |f: fn(&Record) -> Option<f64>| r.iter().filter_map(f).fold(0.0, f64::max);
        Self {
            schema_version: METRICS_SCHEMA_VERSION,
            name: name.to_string(),
            variant,
            seed,
            iterations: r.len(),
            initial_j: r.first().map_or(out.final_j, |x| x.j_exact),
            final_j: out.final_j,
            max_grad_norm_explore: r.iter().map(|x| x.grad_norm_explore).fold(0.0, f64::max),
            mean_grad_norm_explore: r.iter().map(|x| x.grad_norm_explore).sum::<f64>() / n,
            verify_steps: r.iter().filter(|x| x.verify_applied).count(),
            zero_variance_skips: r
                .iter()
                .filter(|x| x.verify_skip_reason == Some(SkipReason::ZeroVarianceHistory))
                .count(),
            stability_warnings: r.iter().filter(|x| x.stability_warning).count(),
            max_pi_zero_sum_residual: max_of(|x| x.pi_zero_sum_residual),
            max_attribution_mass_residual: max_of(|x| x.attribution_mass_residual),
        }
    }
}

pub fn write_summary(summary: &RunSummary, dir: &Path) -> Result<()> {
    let path = dir.join(SUMMARY_FILE);
    std::fs::write(&path, to_json_line(summary) + "\n").map_err(|e| HarnessError::io(&path, e))
}

/// Table of run summaries, one row per run.
pub fn write_summary_table(summaries: &[RunSummary], path: &Path) -> Result<()> {
    let csv_err = |e: csv::Error| HarnessError::io(path, io::Error::other(e));
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record([
        "name",
        "variant",
        "seed",
        "iterations",
        "initial_j",
        "final_j",
        "max_grad_norm_explore",
        "mean_grad_norm_explore",
        "verify_steps",
        "zero_variance_skips",
        "stability_warnings",
    ])
    .map_err(csv_err)?;
    for s in summaries {
        w.write_record([
            s.name.clone(),
            s.variant.to_string(),
            s.seed.to_string(),
            s.iterations.to_string(),
            format_f64(s.initial_j),
            format_f64(s.final_j),
            format_f64(s.max_grad_norm_explore),
            format_f64(s.mean_grad_norm_explore),
            s.verify_steps.to_string(),
            s.zero_variance_skips.to_string(),
            s.stability_warnings.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}
