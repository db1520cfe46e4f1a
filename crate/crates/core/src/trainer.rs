//! The dual-stage loop: a group-relative exploration step on the fresh batch,
//! preceded (once the history window is full) by a retrospective verification
//! step on the previous batch, weighted by policy-improvement rewards.
//!
//! Updates are plain gradient ascent on the logits, so the step-size algebra
//! of the combined update stays exact.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::env::{rlvr_objective, score_row, Gradient, QuerySpace, RowMatrix, SoftmaxPolicy};
use crate::error::{domain, LabError, Result};
use crate::group::{abs_advantage_sum, filter_degenerate, sample_batch, BatchRollout, GroupRollout};
use crate::pirl::{
    attribution_mass_residual, pi_rewards, HistoryMemory, ImprovementSignal, PiRewardSet, SkipReason, StoredBatch,
    EPSILON_SIGMA,
};
use crate::rng::Streams;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Grpo,
    GrpoPipo,
    Dapo,
    DapoPipo,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Grpo, Variant::GrpoPipo, Variant::Dapo, Variant::DapoPipo];

    pub fn uses_pipo(self) -> bool {
        matches!(self, Variant::GrpoPipo | Variant::DapoPipo)
    }

    /// DAPO-style runs drop degenerate groups before the exploration step.
    pub fn filters_groups(self) -> bool {
        matches!(self, Variant::Dapo | Variant::DapoPipo)
    }

    /// `(clip_low, clip_high)` defaults.
    pub fn default_clip(self) -> (f64, f64) {
        if self.filters_groups() {
            (0.2, 0.28)
        } else {
            (0.2, 0.2)
        }
    }

    /// Same family without the verification stage.
    pub fn base(self) -> Variant {
        match self {
            Variant::GrpoPipo => Variant::Grpo,
            Variant::DapoPipo => Variant::Dapo,
            v => v,
        }
    }

    /// Same family with the verification stage.
    pub fn with_verification(self) -> Variant {
        match self {
            Variant::Grpo => Variant::GrpoPipo,
            Variant::Dapo => Variant::DapoPipo,
            v => v,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Grpo => "grpo",
            Variant::GrpoPipo => "grpo_pipo",
            Variant::Dapo => "dapo",
            Variant::DapoPipo => "dapo_pipo",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| LabError::Config(format!("unknown variant {s:?}")))
    }
}

/// Ratio clipping interval `[1 - low, 1 + high]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipRange<T> {
    pub low: T,
    pub high: T,
}

impl<T: Real> ClipRange<T> {
    pub fn symmetric(eps: T) -> Self {
        Self { low: eps, high: eps }
    }

    pub fn clip(&self, ratio: T) -> T {
        ratio.max(T::one() - self.low).min(T::one() + self.high)
    }

    /// Whether `min(ratio * w, clip(ratio) * w)` is taken on the unclipped
    /// branch, i.e. whether the sample passes gradient.
    pub fn passes_gradient(&self, ratio: T, weight: T) -> bool {
        if weight > T::zero() {
            ratio <= T::one() + self.high
        } else if weight < T::zero() {
            ratio >= T::one() - self.low
        } else {
            false
        }
    }

    /// Per-sample clipped surrogate value.
    pub fn surrogate(&self, ratio: T, weight: T) -> T {
        (ratio * weight).min(self.clip(ratio) * weight)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig<T> {
    pub batch_size: usize,
    pub group_size: usize,
    pub window: usize,
    pub lambda: T,
    pub alpha_std: T,
    pub alpha_pi: T,
    pub clip: ClipRange<T>,
    pub variant: Variant,
    pub max_iters: usize,
    pub seed: u64,
    pub epsilon_sigma: T,
}

impl<T: Real> TrainerConfig<T> {
    /// Defaults: G = 8, K = 8, lambda = 0.1, equal learning rates of 0.05,
    /// and the variant's clipping bounds.
    pub fn new(variant: Variant) -> Self {
        let (low, high) = variant.default_clip();
        Self {
            batch_size: 8,
            group_size: 8,
            window: 8,
            lambda: T::lit(0.1),
            alpha_std: T::lit(0.05),
            alpha_pi: T::lit(0.05),
            clip: ClipRange {
                low: T::lit(low),
                high: T::lit(high),
            },
            variant,
            max_iters: 400,
            seed: 0,
            epsilon_sigma: T::lit(EPSILON_SIGMA),
        }
    }

    /// Every violated bound, one message per field.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.batch_size < 1 {
            out.push(format!("batch_size = {}: must be >= 1", self.batch_size));
        }
        if self.group_size < 2 {
            out.push(format!("group_size = {}: must be >= 2", self.group_size));
        }
        if self.window < 2 {
            out.push(format!(
                "window = {}: must be >= 2 (historical standard deviation undefined)",
                self.window
            ));
        }
        if !(self.lambda >= T::zero() && self.lambda <= T::one()) {
            out.push(format!("lambda = {}: must lie in [0, 1]", self.lambda));
        }
        if !(self.alpha_std > T::zero() && self.alpha_std.is_finite()) {
            out.push(format!("alpha_std = {}: must be > 0", self.alpha_std));
        }
        if !(self.alpha_pi >= T::zero() && self.alpha_pi.is_finite()) {
            out.push(format!("alpha_pi = {}: must be >= 0", self.alpha_pi));
        }
        if !(self.clip.low > T::zero() && self.clip.low < T::one()) {
            out.push(format!("clip_low = {}: must lie in (0, 1)", self.clip.low));
        }
        if !(self.clip.high > T::zero() && self.clip.high.is_finite()) {
            out.push(format!("clip_high = {}: must be > 0", self.clip.high));
        }
        if !(self.epsilon_sigma > T::zero()) {
            out.push(format!("epsilon_sigma = {}: must be > 0", self.epsilon_sigma));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(LabError::Config(v.join("; ")))
        }
    }
}

/// Gradient of `(1/divisor) sum_groups (1/G) sum_i min(rho_i w_i, clip(rho_i) w_i)`
/// with `rho_i = pi(y_i) / pi_behavior(y_i)`.
fn surrogate_gradient<T: Real>(
    policy: &SoftmaxPolicy<T>,
    groups: &[GroupRollout<T>],
    weights: &[Option<&[T]>],
    clip: &ClipRange<T>,
) -> Result<Gradient<T>> {
    let mut grad = RowMatrix::zeros_like(policy.logits());
    if groups.is_empty() {
        return Ok(grad);
    }
    let divisor = T::from_count(groups.len());
    for (group, w) in groups.iter().zip(weights) {
        let Some(w) = w else { continue };
        let row = policy.row_of(group.query_id)?;
        let probs = policy.probabilities(row);
        let scale = T::one() / (divisor * T::from_count(group.size()));
        for ((&answer, &behavior), &weight) in group.answers.iter().zip(&group.behavior_log_probs).zip(w.iter()) {
            let ratio = (policy.log_prob(group.query_id, answer)? - behavior).exp();
            if !clip.passes_gradient(ratio, weight) {
                continue;
            }
            let coeff = scale * ratio * weight;
            for (dst, s) in grad.row_mut(row).iter_mut().zip(score_row(&probs, answer)) {
                *dst = *dst + coeff * s;
            }
        }
    }
    Ok(grad)
}

/// Gradient of the clipped group-relative surrogate at `policy`. Degenerate
/// groups count toward the batch size but contribute nothing.
pub fn explore_gradient<T: Real>(
    policy: &SoftmaxPolicy<T>,
    batch: &BatchRollout<T>,
    clip: &ClipRange<T>,
) -> Result<Gradient<T>> {
    if batch.is_empty() {
        return domain("exploration needs a non-empty batch");
    }
    let advantages: Vec<Vec<T>> = batch.groups.iter().map(|g| g.advantages().values).collect();
    let weights: Vec<Option<&[T]>> = advantages.iter().map(|a| Some(a.as_slice())).collect();
    surrogate_gradient(policy, &batch.groups, &weights, clip)
}

/// `theta + alpha * gradient`.
pub fn explore_step<T: Real>(policy: &SoftmaxPolicy<T>, gradient: &Gradient<T>, alpha_std: T) -> SoftmaxPolicy<T> {
    policy.ascend(gradient, alpha_std)
}

/// Gradient of the verification surrogate on the stored batch at `policy`,
/// with ratios taken against the stored behavior log-probabilities and
/// uniform averaging over the stored groups.
pub fn verify_gradient<T: Real>(
    policy: &SoftmaxPolicy<T>,
    prev_batch: &BatchRollout<T>,
    rewards: &PiRewardSet<T>,
    clip: &ClipRange<T>,
) -> Result<Gradient<T>> {
    if rewards.groups.len() != prev_batch.len() {
        return Err(LabError::Shape(format!(
            "{} reward groups for a batch of {}",
            rewards.groups.len(),
            prev_batch.len()
        )));
    }
    for (g, r) in prev_batch.groups.iter().zip(&rewards.groups) {
        if let Some(r) = r {
            if r.len() != g.size() {
                return Err(LabError::Shape(format!(
                    "query {}: {} rewards for {} samples",
                    g.query_id,
                    r.len(),
                    g.size()
                )));
            }
        }
    }
    let weights: Vec<Option<&[T]>> = rewards.groups.iter().map(|r| r.as_deref()).collect();
    surrogate_gradient(policy, &prev_batch.groups, &weights, clip)
}

/// Per-sample verification surrogate values `min(nu r, clip(nu) r)`.
pub fn verify_contributions<T: Real>(
    policy: &SoftmaxPolicy<T>,
    prev_batch: &BatchRollout<T>,
    rewards: &PiRewardSet<T>,
    clip: &ClipRange<T>,
) -> Result<Vec<Vec<(T, T)>>> {
    let mut out = Vec::with_capacity(prev_batch.len());
    for (g, r) in prev_batch.groups.iter().zip(&rewards.groups) {
        let Some(r) = r else {
            out.push(Vec::new());
            continue;
        };
        let mut terms = Vec::with_capacity(g.size());
        for ((&answer, &behavior), &reward) in g.answers.iter().zip(&g.behavior_log_probs).zip(r) {
            let ratio = (policy.log_prob(g.query_id, answer)? - behavior).exp();
            terms.push((reward, clip.surrogate(ratio, reward)));
        }
        out.push(terms);
    }
    Ok(out)
}

/// `k = alpha_std + alpha_pi * G * phi / Z`.
pub fn effective_scaling_factor<T: Real>(alpha_std: T, alpha_pi: T, group_size: usize, phi_xi: T, z: T) -> Result<T> {
    if !(z > T::zero()) {
        return domain("scaling factor needs Z > 0");
    }
    Ok(alpha_std + alpha_pi * T::from_count(group_size) * phi_xi / z)
}

/// Coefficient of the combined update `alpha_std g + alpha_pi v` along `g`:
/// `<alpha_std g + alpha_pi v, g> / ||g||^2`. `None` when `g = 0`.
pub fn measured_scaling_factor<T: Real>(
    alpha_std: T,
    alpha_pi: T,
    explore: &Gradient<T>,
    verify: &Gradient<T>,
) -> Option<T> {
    let gg = explore.dot(explore);
    if gg == T::zero() {
        return None;
    }
    Some(alpha_std + alpha_pi * verify.dot(explore) / gg)
}

/// Result of a verification step.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOutcome<T> {
    pub policy: SoftmaxPolicy<T>,
    pub gradient: Option<Gradient<T>>,
    pub rewards: Option<PiRewardSet<T>>,
    /// Set when `alpha_pi >= 2 alpha_std Z / (G |phi|)` for some stored group.
    pub stability_warning: bool,
}

/// Applies the retrospective update when the signal is ready; identity otherwise.
pub fn verify_step<T: Real>(
    policy: &SoftmaxPolicy<T>,
    stored: &StoredBatch<T>,
    signal: &ImprovementSignal<T>,
    config: &TrainerConfig<T>,
) -> Result<VerifyOutcome<T>> {
    let phi = match (signal.skipped, signal.phi_xi) {
        (None, Some(phi)) => phi,
        _ => {
            return Ok(VerifyOutcome {
                policy: policy.clone(),
                gradient: None,
                rewards: None,
                stability_warning: false,
            })
        }
    };
    let rewards = pi_rewards(&stored.advantages, phi);
    let gradient = verify_gradient(policy, &stored.batch, &rewards, &config.clip)?;

    let mut warning = false;
    if phi != T::zero() {
        for (group, adv) in stored.batch.groups.iter().zip(&stored.advantages) {
            let z = abs_advantage_sum(adv);
            if z == T::zero() {
                continue;
            }
            let bound = T::lit(2.0) * config.alpha_std * z / (T::from_count(group.size()) * phi.abs());
            if config.alpha_pi >= bound {
                warning = true;
                log::debug!(
                    "alpha_pi = {} reaches the stability bound {} (query {}, Z = {}, phi = {})",
                    config.alpha_pi,
                    bound,
                    group.query_id,
                    z,
                    phi
                );
                break;
            }
        }
    }
    Ok(VerifyOutcome {
        policy: policy.ascend(&gradient, config.alpha_pi),
        gradient: Some(gradient),
        rewards: Some(rewards),
        stability_warning: warning,
    })
}

/// Telemetry for one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord<T> {
    pub t: u64,
    pub mu_t: T,
    pub mu_his: Option<T>,
    pub sigma_his: Option<T>,
    pub xi: Option<T>,
    pub phi_xi: Option<T>,
    /// Exact objective of the policy that sampled this iteration's batch.
    pub j_exact: T,
    pub grad_norm_explore: T,
    pub grad_norm_verify: Option<T>,
    pub k_effective: Option<T>,
    pub verify_applied: bool,
    pub verify_skip_reason: Option<SkipReason>,
    pub degenerate_groups: usize,
    pub retained_groups: usize,
    pub pi_zero_sum_residual: Option<T>,
    pub attribution_mass_residual: Option<T>,
    pub stability_warning: bool,
}

/// Mutable state of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub policy: SoftmaxPolicy<T>,
    pub memory: HistoryMemory<T>,
    /// Number of completed iterations.
    pub iteration: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput<T> {
    pub records: Vec<IterationRecord<T>>,
    pub final_policy: SoftmaxPolicy<T>,
    /// Exact objective after the last update.
    pub final_j: T,
}

pub struct Trainer<'a, T> {
    config: TrainerConfig<T>,
    space: &'a QuerySpace,
    streams: Streams,
    state: TrainState<T>,
    warned: bool,
}

impl<'a, T: Real> Trainer<'a, T> {
    pub fn new(config: TrainerConfig<T>, space: &'a QuerySpace, initial_policy: SoftmaxPolicy<T>) -> Result<Self> {
        config.validate()?;
        rlvr_objective(&initial_policy, space)?;
        Ok(Self {
            streams: Streams::new(config.seed),
            state: TrainState {
                policy: initial_policy,
                memory: HistoryMemory::new(config.window)?,
                iteration: 0,
            },
            config,
            space,
            warned: false,
        })
    }

    pub fn state(&self) -> &TrainState<T> {
        &self.state
    }

    pub fn config(&self) -> &TrainerConfig<T> {
        &self.config
    }

    /// Runs iteration `t = state.iteration + 1`.
    pub fn step(&mut self) -> Result<IterationRecord<T>> {
        let cfg = &self.config;
        let t = self.state.iteration + 1;
        let theta_t = &self.state.policy;

        let sampled = sample_batch(theta_t, self.space, cfg.batch_size, cfg.group_size, &self.streams, t)?;
        let mu_t = sampled.mean_reward();
        let j_exact = rlvr_objective(theta_t, self.space)?;
        let degenerate_groups = sampled.degenerate_count();
        let batch = if cfg.variant.filters_groups() {
            filter_degenerate(&sampled).batch
        } else {
            sampled
        };

        let signal = ImprovementSignal::from_memory(&self.state.memory, mu_t, cfg.lambda, cfg.epsilon_sigma)?;

        let mut record = IterationRecord {
            t,
            mu_t,
            mu_his: signal.mu_his,
            sigma_his: signal.sigma_his,
            xi: signal.xi,
            phi_xi: signal.phi_xi,
            j_exact,
            grad_norm_explore: T::zero(),
            grad_norm_verify: None,
            k_effective: None,
            verify_applied: false,
            verify_skip_reason: None,
            degenerate_groups,
            retained_groups: batch.len(),
            pi_zero_sum_residual: None,
            attribution_mass_residual: None,
            stability_warning: false,
        };

        // Phase 2: retrospective verification of the previous exploration step.
        let theta_prime = match (cfg.variant.uses_pipo(), self.state.memory.prev_batch()) {
            (true, Some(stored)) if signal.is_ready() => {
                let outcome = verify_step(theta_t, stored, &signal, cfg)?;
                let v = outcome.gradient.as_ref().expect("ready signal yields a gradient");
                record.verify_applied = true;
                record.grad_norm_verify = Some(v.norm());
                record.k_effective = stored
                    .explore_gradient
                    .as_ref()
                    .and_then(|g| measured_scaling_factor(cfg.alpha_std, cfg.alpha_pi, g, v));
                if let Some(r) = &outcome.rewards {
                    record.pi_zero_sum_residual = Some(r.zero_sum_residual());
                }
                record.attribution_mass_residual = Some(attribution_mass_residual(&stored.advantages));
                record.stability_warning = outcome.stability_warning;
                if outcome.stability_warning && !self.warned {
                    self.warned = true;
                    log::warn!(
                        "seed {}, t = {t}: alpha_pi = {} is at or above the stability bound for some stored group; \
                         later occurrences are logged at debug level",
                        cfg.seed,
                        cfg.alpha_pi
                    );
                }
                outcome.policy
            }
            (true, _) => {
                record.verify_skip_reason = Some(signal.skipped.unwrap_or(SkipReason::WarmUp));
                theta_t.clone()
            }
            (false, _) => theta_t.clone(),
        };

        // Phase 1: exploration on the fresh batch, gradient taken at theta_t.
        let explore = if batch.is_empty() {
            RowMatrix::zeros_like(theta_t.logits())
        } else {
            explore_gradient(theta_t, &batch, &cfg.clip)?
        };
        record.grad_norm_explore = explore.norm();
        let next = explore_step(&theta_prime, &explore, cfg.alpha_std);

        self.state.memory.push(mu_t, StoredBatch::new(batch, Some(explore)));
        self.state.policy = next;
        self.state.iteration = t;
        Ok(record)
    }

    pub fn run(mut self) -> Result<RunOutput<T>> {
        let mut records = Vec::with_capacity(self.config.max_iters);
        for _ in 0..self.config.max_iters {
            records.push(self.step()?);
        }
        let final_j = rlvr_objective(&self.state.policy, self.space)?;
        Ok(RunOutput {
            records,
            final_policy: self.state.policy,
            final_j,
        })
    }
}

/// Runs `config.max_iters` iterations from `initial_policy`.
pub fn run<T: Real>(
    config: TrainerConfig<T>,
    space: &QuerySpace,
    initial_policy: SoftmaxPolicy<T>,
) -> Result<RunOutput<T>> {
    Trainer::new(config, space, initial_policy)?.run()
}
