//! Experiment runners and the built-in suites.

use std::io;
use std::path::{Path, PathBuf};

use pirl_core::theory::{within_standard_errors, EtaEvaluation};
use pirl_core::trainer::run;
use pirl_core::{mc_grpo_gradient, BernoulliTask, Config, RolloutModel, RunOutput, Streams};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentSpec, TheoryGrid};
use crate::environment::{build_environment, Environment};
use crate::error::{HarnessError, Result};
use crate::metrics::{format_f64, write_metrics, write_summary, write_summary_table, MetricsRow, RunSummary};

/// Outcome of one (config, seed) run.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub name: String,
    pub summary: RunSummary,
    pub rows: Vec<MetricsRow>,
    pub output: RunOutput<f64>,
}

/// Runs one configuration and, when `out` is given, writes its artifacts there.
pub fn run_experiment(name: &str, config: Config, env: &Environment, out: Option<&Path>) -> Result<ExperimentResult> {
    let (variant, seed) = (config.variant, config.seed);
    let output = run(config, &env.space, env.initial_policy.clone())?;
    let rows: Vec<MetricsRow> = output
        .records
        .iter()
        .map(|r| MetricsRow::from_record(name, seed, r))
        .collect();
    let summary = RunSummary::new(name, variant, seed, &output);
    if let Some(dir) = out {
        write_metrics(&rows, dir)?;
        write_summary(&summary, dir)?;
    }
    Ok(ExperimentResult {
        name: name.to_string(),
        summary,
        rows,
        output,
    })
}

/// One planned run of a suite.
#[derive(Debug, Clone)]
pub struct Cell {
    pub name: String,
    pub config: Config,
    pub dir: Option<PathBuf>,
}

/// Runs independent cells in parallel; results come back in input order.
pub fn run_cells(cells: &[Cell], env: &Environment) -> Result<Vec<ExperimentResult>> {
    cells
        .par_iter()
        .map(|c| run_experiment(&c.name, c.config.clone(), env, c.dir.as_deref()))
        .collect()
}

fn seed_dir(root: Option<&Path>, sub: &str, seed: u64) -> Option<PathBuf> {
    root.map(|r| r.join(sub).join(format!("seed_{seed}")))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}

/// Every seed of the spec, as given.
pub fn train_cells(spec: &ExperimentSpec, out: Option<&Path>) -> Vec<Cell> {
    spec.seeds
        .iter()
        .map(|&s| Cell {
            name: spec.name.clone(),
            config: spec.config_for(s),
            dir: seed_dir(out, &spec.name, s),
        })
        .collect()
}

/// Base variant and its verification counterpart for every seed, base first.
pub fn stability_cells(spec: &ExperimentSpec, out: Option<&Path>) -> Vec<Cell> {
    let base = spec.trainer.variant.base();
    let pipo = base.with_verification();
    let mut cells = Vec::with_capacity(2 * spec.seeds.len());
    for variant in [base, pipo] {
        for &seed in &spec.seeds {
            let mut config = spec.config_for(seed);
            config.variant = variant;
            cells.push(Cell {
                name: variant.to_string(),
                config,
                dir: seed_dir(out, variant.as_str(), seed),
            });
        }
    }
    cells
}

/// Label of an ablation sweep value directory, e.g. `lambda_0.05`.
pub fn sweep_label(sweep: &str, value: f64) -> String {
    format!("{sweep}_{value}")
}

/// Lambda sweep, window sweep, and the base variant, all on every seed.
pub fn ablation_cells(spec: &ExperimentSpec, out: Option<&Path>) -> Vec<Cell> {
    let pipo = spec.trainer.variant.with_verification();
    let mut cells = Vec::new();
    let mut push = |label: String, config: Config, seed: u64| {
        cells.push(Cell {
            dir: seed_dir(out, &label, seed),
            name: label,
            config,
        })
    };
    for &lambda in &spec.ablation.lambdas {
        for &seed in &spec.seeds {
            let mut c = spec.config_for(seed);
            c.variant = pipo;
            c.lambda = lambda;
            push(sweep_label("lambda", lambda), c, seed);
        }
    }
    for &window in &spec.ablation.windows {
        for &seed in &spec.seeds {
            let mut c = spec.config_for(seed);
            c.variant = pipo;
            c.window = window;
            push(sweep_label("window", window as f64), c, seed);
        }
    }
    for &seed in &spec.seeds {
        let mut c = spec.config_for(seed);
        c.variant = pipo.base();
        push("baseline".to_string(), c, seed);
    }
    cells
}

pub fn run_train(spec: &ExperimentSpec, out: &Path) -> Result<Vec<RunSummary>> {
    let env = build_environment(&spec.environment, &spec.base_dir)?;
    let results = run_cells(&train_cells(spec, Some(out)), &env)?;
    Ok(results.into_iter().map(|r| r.summary).collect())
}

pub fn run_stability(spec: &ExperimentSpec, out: Option<&Path>) -> Result<Vec<ExperimentResult>> {
    let env = build_environment(&spec.environment, &spec.base_dir)?;
    let results = run_cells(&stability_cells(spec, out), &env)?;
    if let Some(dir) = out {
        ensure_dir(dir)?;
        let summaries: Vec<RunSummary> = results.iter().map(|r| r.summary.clone()).collect();
        write_summary_table(&summaries, &dir.join("summary.csv"))?;
    }
    Ok(results)
}

/// Mean final objective per ablation label, in cell order.
pub fn ablation_means(results: &[ExperimentResult]) -> Vec<(String, f64, usize)> {
    let mut out: Vec<(String, f64, usize)> = Vec::new();
    for r in results {
        match out.iter_mut().find(|(label, _, _)| *label == r.name) {
            Some(entry) => {
                entry.1 += r.summary.final_j;
                entry.2 += 1;
            }
            None => out.push((r.name.clone(), r.summary.final_j, 1)),
        }
    }
    out.into_iter().map(|(l, s, n)| (l, s / n as f64, n)).collect()
}

pub fn run_ablation(spec: &ExperimentSpec, out: Option<&Path>) -> Result<Vec<ExperimentResult>> {
    let env = build_environment(&spec.environment, &spec.base_dir)?;
    let results = run_cells(&ablation_cells(spec, out), &env)?;
    if let Some(dir) = out {
        ensure_dir(dir)?;
        let summaries: Vec<RunSummary> = results.iter().map(|r| r.summary.clone()).collect();
        write_summary_table(&summaries, &dir.join("summary.csv"))?;
        let path = dir.join("ablation.csv");
        let csv_err = |e: csv::Error| HarnessError::io(&path, io::Error::other(e));
        let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
        w.write_record(["label", "runs", "mean_final_j"]).map_err(csv_err)?;
        for (label, mean, n) in ablation_means(&results) {
            w.write_record([label, n.to_string(), format_f64(mean)]).map_err(csv_err)?;
        }
        w.flush().map_err(|e| HarnessError::io(&path, e))?;
    }
    Ok(results)
}

/// One `(G, p)` cell of the distortion grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryRow {
    #[serde(rename = "G")]
    pub group_size: usize,
    pub p: f64,
    pub eta_exact: f64,
    pub eta_asymptotic: f64,
    pub mc_ratio: f64,
    pub mc_stderr: f64,
    pub nondeg_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoryReport {
    pub rows: Vec<TheoryRow>,
    /// One message per failed check, naming the cell.
    pub failures: Vec<String>,
}

impl TheoryReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Evaluates the grid and checks, per cell: Monte Carlo agreement within
/// three standard errors, `p <-> 1 - p` symmetry, and the `G = 2` closed form.
pub fn run_theory(grid: &TheoryGrid, seed: u64) -> Result<TheoryReport> {
    let streams = Streams::new(seed);
    let cells: Vec<(usize, f64)> = grid
        .group_sizes
        .iter()
        .flat_map(|&g| grid.p_grid.points().into_iter().map(move |p| (g, p)))
        .collect();
    let evaluated: Vec<Result<(TheoryRow, Vec<String>)>> = cells
        .iter()
        .enumerate()
        .map(|(i, &(g, p))| {
            let eval = EtaEvaluation::at(g, p)?;
            let task = BernoulliTask::with_success_probability(p)?;
            let report = mc_grpo_gradient(&task, g, grid.mc_groups, &streams, i as u64)?;
            let (ratio, se) = report.ratio_to(&task.success_gradient())[0];
            let mut failures = Vec::new();
            let cell = format!("G={g} p={p}");
            if !within_standard_errors(ratio, se, eval.eta_exact, 3.0) {
                failures.push(format!(
                    "{cell}: Monte Carlo ratio {ratio} +- {se} is outside 3 standard errors of eta = {}",
                    eval.eta_exact
                ));
            }
            let mirror = pirl_core::eta_exact(g, 1.0 - p)?;
            if (mirror - eval.eta_exact).abs() > 1e-12 * eval.eta_exact {
                failures.push(format!("{cell}: eta(p) = {} but eta(1-p) = {mirror}", eval.eta_exact));
            }
            if g == 2 {
                let closed = 1.0 / (2.0 * p * (1.0 - p));
                if (eval.eta_exact - closed).abs() > 1e-12 * closed {
                    failures.push(format!("{cell}: eta = {} but 1/(2p(1-p)) = {closed}", eval.eta_exact));
                }
            }
            let row = TheoryRow {
                group_size: g,
                p,
                eta_exact: eval.eta_exact,
                eta_asymptotic: eval.eta_asymptotic,
                mc_ratio: ratio,
                mc_stderr: se,
                nondeg_prob: eval.nondegenerate_prob,
            };
            Ok((row, failures))
        })
        .collect();
    let mut rows = Vec::with_capacity(evaluated.len());
    let mut failures = Vec::new();
    for e in evaluated {
        let (row, f) = e?;
        rows.push(row);
        failures.extend(f);
    }
    Ok(TheoryReport { rows, failures })
}

pub const THEORY_COLUMNS: [&str; 7] = ["G", "p", "eta_exact", "eta_asymptotic", "mc_ratio", "mc_stderr", "nondeg_prob"];

pub fn write_theory(report: &TheoryReport, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    let path = dir.join("theory.csv");
    let csv_err = |e: csv::Error| HarnessError::io(&path, io::Error::other(e));
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    w.write_record(THEORY_COLUMNS).map_err(csv_err)?;
    for r in &report.rows {
        w.write_record([
            r.group_size.to_string(),
            format_f64(r.p),
            format_f64(r.eta_exact),
            format_f64(r.eta_asymptotic),
            format_f64(r.mc_ratio),
            format_f64(r.mc_stderr),
            format_f64(r.nondeg_prob),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| HarnessError::io(&path, e))?;
    let report_path = dir.join("theory_report.txt");
    let text = if report.passed() {
        format!("all {} cells passed\n", report.rows.len())
    } else {
        report.failures.join("\n") + "\n"
    };
    std::fs::write(&report_path, text).map_err(|e| HarnessError::io(&report_path, e))
}

/// Fails with the first failing cell named when any check did not hold.
pub fn theory_verdict(report: &TheoryReport) -> Result<()> {
    match report.failures.first() {
        None => Ok(()),
        Some(first) => Err(HarnessError::Assertion(format!(
            "{} of {} theory checks failed; first: {first}",
            report.failures.len(),
            report.rows.len()
        ))),
    }
}
