//! Configuration, orchestration and artifacts for `pirl-core` experiments.

pub mod compare;
pub mod config;
pub mod environment;
pub mod error;
pub mod metrics;
pub mod suites;

pub use compare::{compare_runs, DiffReport};
pub use config::{load_config, parse_config, ExperimentSpec};
pub use environment::{build_environment, Environment, EnvironmentSpec, GeneratorSpec};
pub use error::{HarnessError, Result};
pub use metrics::{read_jsonl, write_metrics, MetricsRow, RunSummary};
pub use suites::{run_ablation, run_experiment, run_stability, run_theory, ExperimentResult, TheoryReport};
