//! Where a run's query space and starting policy come from: a JSON file or
//! a generator that places each query at a target success probability.

use std::path::{Path, PathBuf};

use pirl_core::{policy_from_json, success_rate, Policy, QuerySpace, QuerySpec};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Success probabilities near both boundaries and the middle.
pub const BOUNDARY_PROFILE: [f64; 3] = [0.02, 0.5, 0.98];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvironmentSpec {
    /// Query space file, optionally with a `logits` matrix for the starting policy.
    File(PathBuf),
    Generator(GeneratorSpec),
}

impl Default for EnvironmentSpec {
    fn default() -> Self {
        Self::Generator(GeneratorSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub num_queries: usize,
    pub vocab_size: usize,
    /// Target initial success probability of query `i` is `difficulty[i % len]`.
    pub difficulty: Vec<f64>,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            num_queries: 12,
            vocab_size: 8,
            difficulty: BOUNDARY_PROFILE.to_vec(),
        }
    }
}

impl GeneratorSpec {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.num_queries == 0 {
            out.push("environment.generator.num_queries = 0: must be >= 1".to_string());
        }
        if self.vocab_size < 2 {
            out.push(format!(
                "environment.generator.vocab_size = {}: must be >= 2",
                self.vocab_size
            ));
        }
        if self.difficulty.is_empty() {
            out.push("environment.generator.difficulty: must not be empty".to_string());
        }
        for (i, p) in self.difficulty.iter().enumerate() {
            if !(*p > 0.0 && *p < 1.0) {
                out.push(format!("environment.generator.difficulty[{i}] = {p}: must lie in (0, 1)"));
            }
        }
        out
    }

    /// One correct answer per query; its logit is `ln(p (V - 1) / (1 - p))`
    /// with every other logit at zero, so the initial success rate is exactly `p`.
    pub fn generate(&self) -> Result<Environment> {
        let v = self.violations();
        if !v.is_empty() {
            return Err(HarnessError::Config(v));
        }
        let others = (self.vocab_size - 1) as f64;
        let mut queries = Vec::with_capacity(self.num_queries);
        let mut logits = Vec::with_capacity(self.num_queries);
        for i in 0..self.num_queries {
            let p = self.difficulty[i % self.difficulty.len()];
            queries.push(QuerySpec::new(i as u64, self.vocab_size, [0])?);
            let mut row = vec![0.0; self.vocab_size];
            row[0] = (p * others / (1.0 - p)).ln();
            logits.push(row);
        }
        let space = QuerySpace::uniform(queries)?;
        let initial_policy = Policy::from_logits(&space, logits)?;
        Ok(Environment { space, initial_policy })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    pub space: QuerySpace,
    pub initial_policy: Policy,
}

impl Environment {
    pub fn initial_success_rates(&self) -> Vec<f64> {
        self.space
            .queries()
            .iter()
            .map(|q| success_rate(&self.initial_policy, q).expect("query of this space"))
            .collect()
    }
}

/// Builds the environment; file paths resolve against `base_dir`.
pub fn build_environment(spec: &EnvironmentSpec, base_dir: &Path) -> Result<Environment> {
    match spec {
        EnvironmentSpec::Generator(g) => g.generate(),
        EnvironmentSpec::File(path) => {
            let path = base_dir.join(path);
            let text = std::fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
            let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| HarnessError::Format {
                path: path.clone(),
                message: e.to_string(),
            })?;
            if value.get("logits").is_some() {
                let (space, initial_policy) = policy_from_json::<f64>(&text)?;
                Ok(Environment { space, initial_policy })
            } else {
                let space = QuerySpace::from_json(&text)?;
                let initial_policy = Policy::uniform(&space);
                Ok(Environment { space, initial_policy })
            }
        }
    }
}
