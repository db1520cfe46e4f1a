use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pirl_lab::config::{PGrid, TheoryGrid};
use pirl_lab::suites::{run_train, theory_verdict, write_theory};
use pirl_lab::{compare_runs, load_config, run_ablation, run_stability, run_theory, HarnessError, Result};

#[derive(Parser)]
#[command(name = "pirl-lab", version, about = "Policy-improvement RL laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Distortion-factor grid with Monte Carlo cross-checks.
    Theory {
        /// Comma-separated group sizes.
        #[arg(long, value_delimiter = ',', default_value = "2,4,8,128")]
        group_sizes: Vec<usize>,
        /// Success-probability grid as lo:hi:n.
        #[arg(long, default_value = "0.1:0.9:9")]
        p_grid: String,
        /// Groups drawn per cell.
        #[arg(long, default_value_t = 200_000)]
        mc_groups: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "theory-out")]
        out: PathBuf,
    },
    /// Train every seed of a config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Replaces the config's seed list.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a built-in suite.
    Suite {
        suite: SuiteName,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Column-wise differences between two runs (files or run directories).
    Compare { a: PathBuf, b: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteName {
    Theory,
    Stability,
    Ablation,
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("PIRL_LAB_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| HarnessError::config(format!("PIRL_LAB_THREADS = {raw:?}: expected a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| HarnessError::config(e.to_string()))
}

fn theory(grid: &TheoryGrid, seed: u64, out: &Path) -> Result<()> {
    let report = run_theory(grid, seed)?;
    write_theory(&report, out)?;
    println!("{} cells written to {}", report.rows.len(), out.join("theory.csv").display());
    theory_verdict(&report)
}

fn execute(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Theory {
            group_sizes,
            p_grid,
            mc_groups,
            seed,
            out,
        } => {
            let grid = TheoryGrid {
                group_sizes,
                p_grid: p_grid.parse::<PGrid>()?,
                mc_groups,
            };
            let v = grid.violations();
            if !v.is_empty() {
                return Err(HarnessError::Config(v));
            }
            theory(&grid, seed, &out)
        }
        Command::Train { config, seed, out } => {
            let mut spec = load_config(&config)?;
            if let Some(s) = seed {
                spec.seeds = vec![s];
            }
            let out = out
                .or_else(|| spec.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from("runs"));
            for s in run_train(&spec, &out)? {
                println!(
                    "{} seed {}: J {:.6} -> {:.6}, max explore norm {:.6}, verify steps {}",
                    s.name, s.seed, s.initial_j, s.final_j, s.max_grad_norm_explore, s.verify_steps
                );
            }
            Ok(())
        }
        Command::Suite { suite, config, out } => {
            let spec = load_config(&config)?;
            match suite {
                SuiteName::Theory => theory(&spec.theory, spec.seeds[0], &out),
                SuiteName::Stability => {
                    for r in run_stability(&spec, Some(&out))? {
                        let s = r.summary;
                        println!(
                            "{:<10} seed {:<6} final J {:.6}  max explore norm {:.6}",
                            s.variant, s.seed, s.final_j, s.max_grad_norm_explore
                        );
                    }
                    Ok(())
                }
                SuiteName::Ablation => {
                    let results = run_ablation(&spec, Some(&out))?;
                    for (label, mean, n) in pirl_lab::suites::ablation_means(&results) {
                        println!("{label:<14} mean final J {mean:.6} over {n} seeds");
                    }
                    Ok(())
                }
            }
        }
        Command::Compare { a, b } => {
            let report = compare_runs(&a, &b)?;
            print!("{report}");
            if report.shared_values_identical() {
                Ok(())
            } else {
                Err(HarnessError::Assertion("runs differ on shared values".to_string()))
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
