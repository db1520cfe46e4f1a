//! Experiment configuration files.
//!
//! A config is a flat JSON object. Only `variant` and `seed` (or `seeds`) are
//! required; every other trainer field falls back to the variant's defaults.

use std::path::{Path, PathBuf};

use pirl_core::{Config, Variant};
use serde::{Deserialize, Serialize};

use crate::environment::EnvironmentSpec;
use crate::error::{HarnessError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    schema_version: Option<u32>,
    name: Option<String>,
    variant: Option<Variant>,
    seed: Option<u64>,
    seeds: Option<Vec<u64>>,
    batch_size: Option<usize>,
    group_size: Option<usize>,
    window: Option<usize>,
    lambda: Option<f64>,
    alpha_std: Option<f64>,
    alpha_pi: Option<f64>,
    clip_low: Option<f64>,
    clip_high: Option<f64>,
    max_iters: Option<usize>,
    epsilon_sigma: Option<f64>,
    environment: Option<EnvironmentSpec>,
    output_dir: Option<PathBuf>,
    theory: Option<TheoryGrid>,
    ablation: Option<AblationGrid>,
}

/// Grid for the distortion-factor suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryGrid {
    pub group_sizes: Vec<usize>,
    pub p_grid: PGrid,
    pub mc_groups: usize,
}

impl Default for TheoryGrid {
    fn default() -> Self {
        Self {
            group_sizes: vec![2, 4, 8, 128],
            p_grid: PGrid { lo: 0.1, hi: 0.9, n: 9 },
            mc_groups: 200_000,
        }
    }
}

/// `n` evenly spaced points from `lo` to `hi` inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PGrid {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl PGrid {
    pub fn points(&self) -> Vec<f64> {
        match self.n {
            0 => Vec::new(),
            1 => vec![self.lo],
            n => (0..n)
                .map(|i| self.lo + (self.hi - self.lo) * i as f64 / (n - 1) as f64)
                .collect(),
        }
    }

    fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.n == 0 {
            out.push("theory.p_grid.n = 0: must be >= 1".to_string());
        }
        for (field, v) in [("lo", self.lo), ("hi", self.hi)] {
            if !(v > 0.0 && v < 1.0) {
                out.push(format!("theory.p_grid.{field} = {v}: must lie in (0, 1)"));
            }
        }
        if self.lo > self.hi {
            out.push(format!("theory.p_grid: lo = {} exceeds hi = {}", self.lo, self.hi));
        }
        out
    }
}

impl std::str::FromStr for PGrid {
    type Err = HarnessError;

    /// Parses `lo:hi:n`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || HarnessError::config(format!("p-grid {s:?}: expected lo:hi:n"));
        let [lo, hi, n] = parts.as_slice() else {
            return Err(bad());
        };
        let grid = PGrid {
            lo: lo.trim().parse().map_err(|_| bad())?,
            hi: hi.trim().parse().map_err(|_| bad())?,
            n: n.trim().parse().map_err(|_| bad())?,
        };
        let v = grid.violations();
        if v.is_empty() {
            Ok(grid)
        } else {
            Err(HarnessError::Config(v))
        }
    }
}

impl TheoryGrid {
    pub fn violations(&self) -> Vec<String> {
        let mut out = self.p_grid.violations();
        if self.group_sizes.is_empty() {
            out.push("theory.group_sizes: must not be empty".to_string());
        }
        if let Some(g) = self.group_sizes.iter().find(|&&g| g < 2) {
            out.push(format!("theory.group_sizes contains {g}: every size must be >= 2"));
        }
        if self.mc_groups < pirl_core::theory::MIN_MC_GROUPS {
            out.push(format!(
                "theory.mc_groups = {}: must be >= {}",
                self.mc_groups,
                pirl_core::theory::MIN_MC_GROUPS
            ));
        }
        out
    }
}

/// Sweep values for the ablation suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrid {
    pub lambdas: Vec<f64>,
    pub windows: Vec<usize>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self {
            lambdas: vec![0.0, 0.05, 0.1, 0.2, 0.5, 1.0],
            windows: vec![2, 4, 8, 16, 32],
        }
    }
}

impl AblationGrid {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, l) in self.lambdas.iter().enumerate() {
            if !(0.0..=1.0).contains(l) {
                out.push(format!("ablation.lambdas[{i}] = {l}: must lie in [0, 1]"));
            }
        }
        for (i, k) in self.windows.iter().enumerate() {
            if *k < 2 {
                out.push(format!("ablation.windows[{i}] = {k}: must be >= 2"));
            }
        }
        out
    }
}

/// A validated experiment description.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub name: String,
    /// Trainer settings; `trainer.seed` is overwritten per run.
    pub trainer: Config,
    pub environment: EnvironmentSpec,
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
    /// Directory that relative paths in the config resolve against.
    pub base_dir: PathBuf,
    pub theory: TheoryGrid,
    pub ablation: AblationGrid,
}

impl ExperimentSpec {
    /// Trainer config for one seed.
    pub fn config_for(&self, seed: u64) -> Config {
        let mut c = self.trainer.clone();
        c.seed = seed;
        c
    }
}

/// Parses and validates config text.
pub fn parse_config(text: &str, base_dir: &Path) -> Result<ExperimentSpec> {
    let raw: RawConfig = serde_json::from_str(text).map_err(|e| HarnessError::config(e.to_string()))?;
    let mut errors = Vec::new();

    if let Some(v) = raw.schema_version {
        if v != SCHEMA_VERSION {
            errors.push(format!("schema_version = {v}: only {SCHEMA_VERSION} is supported"));
        }
    }
    let variant = raw.variant.unwrap_or_else(|| {
        errors.push("variant: missing (one of grpo, grpo_pipo, dapo, dapo_pipo)".to_string());
        Variant::Grpo
    });
    let seeds = match (raw.seed, raw.seeds) {
        (Some(_), Some(_)) => {
            errors.push("seed and seeds: give only one".to_string());
            Vec::new()
        }
        (Some(s), None) => vec![s],
        (None, Some(list)) => {
            if list.is_empty() {
                errors.push("seeds: must not be empty".to_string());
            }
            list
        }
        (None, None) => {
            errors.push("seed: missing (give seed or seeds)".to_string());
            Vec::new()
        }
    };

    let mut trainer = Config::new(variant);
    trainer.batch_size = raw.batch_size.unwrap_or(trainer.batch_size);
    trainer.group_size = raw.group_size.unwrap_or(trainer.group_size);
    trainer.window = raw.window.unwrap_or(trainer.window);
    trainer.lambda = raw.lambda.unwrap_or(trainer.lambda);
    trainer.alpha_std = raw.alpha_std.unwrap_or(trainer.alpha_std);
    trainer.alpha_pi = raw.alpha_pi.unwrap_or(trainer.alpha_pi);
    trainer.clip.low = raw.clip_low.unwrap_or(trainer.clip.low);
    trainer.clip.high = raw.clip_high.unwrap_or(trainer.clip.high);
    trainer.max_iters = raw.max_iters.unwrap_or(trainer.max_iters);
    trainer.epsilon_sigma = raw.epsilon_sigma.unwrap_or(trainer.epsilon_sigma);
    trainer.seed = seeds.first().copied().unwrap_or(0);
    errors.extend(trainer.violations());
    if trainer.max_iters == 0 {
        errors.push("max_iters = 0: must be >= 1".to_string());
    }

    let environment = raw.environment.unwrap_or_default();
    if let EnvironmentSpec::Generator(g) = &environment {
        errors.extend(g.violations());
    }
    let theory = raw.theory.unwrap_or_default();
    errors.extend(theory.violations());
    let ablation = raw.ablation.unwrap_or_default();
    errors.extend(ablation.violations());

    if !errors.is_empty() {
        return Err(HarnessError::Config(errors));
    }
    Ok(ExperimentSpec {
        name: raw.name.unwrap_or_else(|| variant.to_string()),
        trainer,
        environment,
        seeds,
        output_dir: raw.output_dir,
        base_dir: base_dir.to_path_buf(),
        theory,
        ablation,
    })
}

pub fn load_config(path: &Path) -> Result<ExperimentSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_config(&text, &base)
}
