//! Column-wise differences between two metrics files.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use crate::error::{HarnessError, Result};
use crate::metrics::JSONL_FILE;

/// Columns that identify a run rather than describe it.
const IDENTITY_COLUMNS: [&str; 2] = ["name", "seed"];

/// Columns describing the verification step, which only one variant family populates.
pub const VERIFY_COLUMNS: [&str; 7] = [
    "verify_applied",
    "verify_skip_reason",
    "grad_norm_verify",
    "k_effective",
    "pi_zero_sum_residual",
    "attribution_mass_residual",
    "stability_warning",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnDiff {
    pub column: String,
    /// Largest absolute difference over iterations where both values are present.
    pub max_abs_diff: f64,
    /// First iteration with a nonzero difference.
    pub first_diff_t: Option<u64>,
    /// Iterations where exactly one side has a value.
    pub presence_mismatches: usize,
    /// Listed in [`VERIFY_COLUMNS`]; excluded from the shared-value verdict.
    pub verify_only: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffReport {
    pub rows_a: usize,
    pub rows_b: usize,
    pub columns: Vec<ColumnDiff>,
    /// Per-iteration maximum over the non-verify columns, as `(t, diff)`.
    pub per_iteration: Vec<(u64, f64)>,
}

impl DiffReport {
    /// True when the row counts match and every non-verify value agrees.
    pub fn shared_values_identical(&self) -> bool {
        self.rows_a == self.rows_b && self.columns.iter().all(|c| c.verify_only || c.max_abs_diff == 0.0)
    }

    pub fn column(&self, name: &str) -> Option<&ColumnDiff> {
        self.columns.iter().find(|c| c.column == name)
    }
}

impl fmt::Display for DiffReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "rows: {} vs {}", self.rows_a, self.rows_b)?;
        writeln!(f, "{:<28} {:>24} {:>10} {:>10}", "column", "max_abs_diff", "first_t", "presence")?;
        for c in &self.columns {
            let first = c.first_diff_t.map_or("-".to_string(), |t| t.to_string());
            let column = if c.verify_only { format!("{} (verify)", c.column) } else { c.column.clone() };
            writeln!(
                f,
                "{:<28} {:>24.16e} {:>10} {:>10}",
                column, c.max_abs_diff, first, c.presence_mismatches
            )?;
        }
        Ok(())
    }
}

/// Accepts a metrics file or a run directory containing one.
pub fn resolve_metrics_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(JSONL_FILE)
    } else {
        path.to_path_buf()
    }
}

fn read_objects(path: &Path) -> Result<Vec<Map<String, Value>>> {
    let file = File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| HarnessError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(Value::Object(m)) => out.push(m),
            Ok(_) => {
                return Err(HarnessError::Format {
                    path: path.to_path_buf(),
                    message: format!("line {}: expected a JSON object", i + 1),
                })
            }
            Err(e) => {
                return Err(HarnessError::Format {
                    path: path.to_path_buf(),
                    message: format!("line {}: {e}", i + 1),
                })
            }
        }
    }
    Ok(out)
}

fn column_order(rows: &[Map<String, Value>]) -> Vec<String> {
    rows.first().map(|r| r.keys().cloned().collect()).unwrap_or_default()
}

/// Numeric view of a cell: numbers as-is, booleans as 0/1, strings by identity.
fn difference(a: &Value, b: &Value) -> Option<f64> {
    match (a, b) {
        (Value::Null, _) | (_, Value::Null) => None,
        (Value::Number(x), Value::Number(y)) => Some((x.as_f64()? - y.as_f64()?).abs()),
        (Value::Bool(x), Value::Bool(y)) => Some(f64::from(u8::from(x != y))),
        (x, y) => Some(if x == y { 0.0 } else { f64::INFINITY }),
    }
}

pub fn compare_runs(path_a: &Path, path_b: &Path) -> Result<DiffReport> {
    let (pa, pb) = (resolve_metrics_path(path_a), resolve_metrics_path(path_b));
    let a = read_objects(&pa)?;
    let b = read_objects(&pb)?;
    for (rows, path) in [(&a, &pa), (&b, &pb)] {
        let cols: BTreeSet<&String> = rows.first().map(|r| r.keys().collect()).unwrap_or_default();
        if let Some(i) = rows.iter().position(|r| r.keys().collect::<BTreeSet<_>>() != cols) {
            return Err(HarnessError::Schema(format!(
                "{}: row {} has different columns",
                path.display(),
                i + 1
            )));
        }
    }
    let (cols_a, cols_b) = (column_order(&a), column_order(&b));
    if !a.is_empty() && !b.is_empty() && cols_a != cols_b {
        return Err(HarnessError::Schema(format!(
            "{} has columns [{}] but {} has [{}]",
            pa.display(),
            cols_a.join(","),
            pb.display(),
            cols_b.join(",")
        )));
    }
    let columns: Vec<String> = if cols_a.is_empty() { cols_b } else { cols_a }
        .into_iter()
        .filter(|c| !IDENTITY_COLUMNS.contains(&c.as_str()))
        .collect();

    let mut diffs: Vec<ColumnDiff> = columns
        .iter()
        .map(|c| ColumnDiff {
            column: c.clone(),
            max_abs_diff: 0.0,
            first_diff_t: None,
            presence_mismatches: 0,
            verify_only: VERIFY_COLUMNS.contains(&c.as_str()),
        })
        .collect();
    let mut per_iteration = Vec::with_capacity(a.len().min(b.len()));
    for (i, (ra, rb)) in a.iter().zip(&b).enumerate() {
        let t = ra.get("t").and_then(Value::as_u64).unwrap_or(i as u64 + 1);
        let mut worst = 0.0f64;
        for d in diffs.iter_mut() {
            let (va, vb) = (&ra[&d.column], &rb[&d.column]);
            if va.is_null() != vb.is_null() {
                d.presence_mismatches += 1;
            }
            if let Some(diff) = difference(va, vb) {
                if diff > 0.0 && d.first_diff_t.is_none() {
                    d.first_diff_t = Some(t);
                }
                d.max_abs_diff = d.max_abs_diff.max(diff);
                if !d.verify_only {
                    worst = worst.max(diff);
                }
            }
        }
        per_iteration.push((t, worst));
    }
    Ok(DiffReport {
        rows_a: a.len(),
        rows_b: b.len(),
        columns: diffs,
        per_iteration,
    })
}
