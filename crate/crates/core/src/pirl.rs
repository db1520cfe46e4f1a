//! Inter-iteration feedback: the sliding window of batch means, the
//! standardized improvement signal, asymmetric rectification, and the
//! policy-improvement rewards that redistribute that signal over the
//! previous batch.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::env::Gradient;
use crate::error::{domain, LabError, Result};
use crate::group::{abs_advantage_sum, BatchRollout};
use crate::scalar::Real;

/// Zero-variance guard for the historical standard deviation.
pub const EPSILON_SIGMA: f64 = 1e-8;

/// Why a verification step did not run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SkipReason {
    #[serde(rename = "warm-up")]
    WarmUp,
    #[serde(rename = "zero-variance history")]
    ZeroVarianceHistory,
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SkipReason::WarmUp => "warm-up",
            SkipReason::ZeroVarianceHistory => "zero-variance history",
        })
    }
}

/// The previous batch together with what the verification step needs from it.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredBatch<T> {
    pub batch: BatchRollout<T>,
    /// Group-relative advantages computed when the batch was sampled.
    pub advantages: Vec<Vec<T>>,
    /// Exploration gradient that was applied with this batch, if recorded.
    pub explore_gradient: Option<Gradient<T>>,
}

impl<T: Real> StoredBatch<T> {
    pub fn new(batch: BatchRollout<T>, explore_gradient: Option<Gradient<T>>) -> Self {
        let advantages = batch.groups.iter().map(|g| g.advantages().values).collect();
        Self {
            batch,
            advantages,
            explore_gradient,
        }
    }
}

/// Window of the last `K` batch means plus the single most recent batch.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryMemory<T> {
    capacity: usize,
    mu_window: VecDeque<T>,
    prev: Option<StoredBatch<T>>,
}

/// Outcome of reading the window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HistoryStats<T> {
    WarmUp { filled: usize, capacity: usize },
    Ready { mu_his: T, sigma_his: T },
}

impl<T: Real> HistoryMemory<T> {
    /// `capacity` is the window size `K`; the sample standard deviation over
    /// the window needs `K >= 2`.
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity < 2 {
            return Err(LabError::Config(format!(
                "window K = {capacity}: historical standard deviation needs K >= 2"
            )));
        }
        Ok(Self {
            capacity,
            mu_window: VecDeque::with_capacity(capacity),
            prev: None,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn window(&self) -> impl Iterator<Item = &T> {
        self.mu_window.iter()
    }

    pub fn len(&self) -> usize {
        self.mu_window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu_window.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.mu_window.len() == self.capacity
    }

    pub fn prev_batch(&self) -> Option<&StoredBatch<T>> {
        self.prev.as_ref()
    }

    /// Appends `mu_t` (evicting the oldest mean when full) and replaces the stored batch.
    pub fn push(&mut self, mu_t: T, batch: StoredBatch<T>) {
        if self.mu_window.len() == self.capacity {
            self.mu_window.pop_front();
        }
        self.mu_window.push_back(mu_t);
        self.prev = Some(batch);
    }

    /// Window mean and sample standard deviation (divisor `K - 1`).
    pub fn historical_stats(&self) -> HistoryStats<T> {
        if !self.is_full() {
            return HistoryStats::WarmUp {
                filled: self.mu_window.len(),
                capacity: self.capacity,
            };
        }
        let k = T::from_count(self.capacity);
        let mu_his = self.mu_window.iter().copied().sum::<T>() / k;
        let ss: T = self.mu_window.iter().map(|&m| (m - mu_his) * (m - mu_his)).sum();
        HistoryStats::Ready {
            mu_his,
            sigma_his: (ss / (k - T::one())).sqrt(),
        }
    }
}

/// Standardized improvement, or the reason it is unavailable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Xi<T> {
    Value(T),
    Skip(SkipReason),
}

/// `(mu_t - mu_his) / sigma_his`, skipped when `sigma_his < epsilon_sigma`.
pub fn xi<T: Real>(mu_t: T, mu_his: T, sigma_his: T, epsilon_sigma: T) -> Xi<T> {
    if sigma_his < epsilon_sigma {
        Xi::Skip(SkipReason::ZeroVarianceHistory)
    } else {
        Xi::Value((mu_t - mu_his) / sigma_his)
    }
}

/// Asymmetric rectification: identity on `x >= 0`, `lambda * x` below zero.
pub fn phi_lambda<T: Real>(x: T, lambda: T) -> Result<T> {
    if !(lambda >= T::zero() && lambda <= T::one()) {
        return Err(LabError::Config(format!("lambda = {lambda} outside [0, 1]")));
    }
    Ok(if x >= T::zero() { x } else { lambda * x })
}

/// Everything the verification step learns from the current batch mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImprovementSignal<T> {
    pub mu_t: T,
    pub mu_his: Option<T>,
    pub sigma_his: Option<T>,
    pub xi: Option<T>,
    pub phi_xi: Option<T>,
    pub skipped: Option<SkipReason>,
}

impl<T: Real> ImprovementSignal<T> {
    pub fn from_memory(memory: &HistoryMemory<T>, mu_t: T, lambda: T, epsilon_sigma: T) -> Result<Self> {
        let (mu_his, sigma_his) = match memory.historical_stats() {
            HistoryStats::WarmUp { .. } => {
                return Ok(Self {
                    mu_t,
                    mu_his: None,
                    sigma_his: None,
                    xi: None,
                    phi_xi: None,
                    skipped: Some(SkipReason::WarmUp),
                })
            }
            HistoryStats::Ready { mu_his, sigma_his } => (mu_his, sigma_his),
        };
        let (xi, phi_xi, skipped) = match xi(mu_t, mu_his, sigma_his, epsilon_sigma) {
            Xi::Value(v) => (Some(v), Some(phi_lambda(v, lambda)?), None),
            Xi::Skip(reason) => (None, None, Some(reason)),
        };
        Ok(Self {
            mu_t,
            mu_his: Some(mu_his),
            sigma_his: Some(sigma_his),
            xi,
            phi_xi,
            skipped,
        })
    }

    pub fn is_ready(&self) -> bool {
        self.skipped.is_none()
    }
}

/// `A~_i = G A_i / sum_j |A_j|`; `None` for a degenerate group.
pub fn normalized_local_advantages<T: Real>(advantages: &[T]) -> Option<Vec<T>> {
    let z = abs_advantage_sum(advantages);
    if z == T::zero() {
        return None;
    }
    let g = T::from_count(advantages.len());
    Some(advantages.iter().map(|&a| g * a / z).collect())
}

/// Policy-improvement rewards aligned with the groups of the stored batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PiRewardSet<T> {
    /// `None` for degenerate groups, which carry no attribution.
    pub groups: Vec<Option<Vec<T>>>,
}

impl<T: Real> PiRewardSet<T> {
    /// Largest `|sum_i r_i|` over non-degenerate groups.
    pub fn zero_sum_residual(&self) -> T {
        self.groups
            .iter()
            .flatten()
            .map(|r| r.iter().copied().sum::<T>().abs())
            .fold(T::zero(), T::max)
    }
}

/// `r_i = A~_i * phi`, per group.
pub fn pi_rewards<T: Real>(prev_group_advantages: &[Vec<T>], phi_xi: T) -> PiRewardSet<T> {
    PiRewardSet {
        groups: prev_group_advantages
            .iter()
            .map(|adv| normalized_local_advantages(adv).map(|local| local.iter().map(|&a| a * phi_xi).collect()))
            .collect(),
    }
}

/// Largest `| sum_i |A~_i| - G |` over the non-degenerate groups.
pub fn attribution_mass_residual<T: Real>(prev_group_advantages: &[Vec<T>]) -> T {
    prev_group_advantages
        .iter()
        .filter_map(|adv| normalized_local_advantages(adv).map(|l| (l, adv.len())))
        .map(|(local, g)| (abs_advantage_sum(&local) - T::from_count(g)).abs())
        .fold(T::zero(), T::max)
}

/// `J_t - mean(window)`, or `None` while the window is filling.
pub fn smoothed_improvement<T: Real>(j_t: T, memory: &HistoryMemory<T>) -> Option<T> {
    match memory.historical_stats() {
        HistoryStats::Ready { mu_his, .. } => Some(j_t - mu_his),
        HistoryStats::WarmUp { .. } => None,
    }
}

/// Sum of step-wise gains against `J_T - J_0` for `J_0, ..., J_T`.
pub fn telescoping_check<T: Real>(j_sequence: &[T]) -> Result<(T, T)> {
    if j_sequence.len() < 2 {
        return domain("telescoping needs at least two values");
    }
    let lhs = j_sequence.windows(2).map(|w| w[1] - w[0]).sum();
    let rhs = j_sequence[j_sequence.len() - 1] - j_sequence[0];
    Ok((lhs, rhs))
}

/// Both sides of the window-smoothed cumulative improvement identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedSumIdentity<T> {
    /// `sum_{t=1}^T (J_t - (1/K) sum_{k=1}^K J_{t-k})`, with `J_m = J_0` for `m <= 0`.
    pub lhs: T,
    /// `sum_{i=0}^{K-1} ((K-i)/K) J_{T-i} + c_init`.
    pub rhs: T,
    /// Contribution of the constant pre-history.
    pub c_init: T,
}

/// `trajectory` holds `J_1, ..., J_T`; `j0` is the constant performance of
/// every policy before optimization starts.
pub fn weighted_sum_identity<T: Real>(j0: T, trajectory: &[T], window: usize) -> Result<WeightedSumIdentity<T>> {
    let t_len = trajectory.len();
    if window == 0 {
        return domain("window must be positive");
    }
    if t_len <= window {
        return domain(format!("need T > K, got T = {t_len}, K = {window}"));
    }
    let k = T::from_count(window);
    let at = |m: isize| if m <= 0 { j0 } else { trajectory[m as usize - 1] };

    let lhs = (1..=t_len as isize)
        .map(|t| {
            let baseline = (1..=window as isize).map(|j| at(t - j)).sum::<T>() / k;
            at(t) - baseline
        })
        .sum();

    // A pre-history value J_m (m in 1-K..=0) is subtracted once for each t in 1..=K+m.
    let c_init = -(1 - window as isize..=0)
        .map(|m| T::from_count((window as isize + m) as usize) * j0)
        .sum::<T>()
        / k;
    let tail = (0..window)
        .map(|i| T::from_count(window - i) / k * trajectory[t_len - 1 - i])
        .sum::<T>();
    Ok(WeightedSumIdentity {
        lhs,
        rhs: tail + c_init,
        c_init,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::grpo_advantages;

    fn empty_batch() -> StoredBatch<f64> {
        StoredBatch::new(BatchRollout::new(vec![], 0).unwrap(), None)
    }

    #[test]
    fn push_keeps_last_k_in_order() {
        let mut m = HistoryMemory::new(2).unwrap();
        m.push(0.1, empty_batch());
        assert_eq!(m.len(), 1);
        m.push(0.2, empty_batch());
        m.push(0.3, empty_batch());
        assert_eq!(m.window().copied().collect::<Vec<_>>(), vec![0.2, 0.3]);
    }

    #[test]
    fn window_of_one_is_rejected() {
        assert!(matches!(HistoryMemory::<f64>::new(1), Err(LabError::Config(_))));
    }

    #[test]
    fn historical_stats_examples() {
        let mut m = HistoryMemory::new(3).unwrap();
        for v in [0.4, 0.5] {
            m.push(v, empty_batch());
        }
        assert_eq!(m.historical_stats(), HistoryStats::WarmUp { filled: 2, capacity: 3 });
        m.push(0.6, empty_batch());
        let HistoryStats::Ready { mu_his, sigma_his } = m.historical_stats() else { panic!() };
        assert!((mu_his - 0.5).abs() < 1e-15 && (sigma_his - 0.1).abs() < 1e-15);

        let mut c = HistoryMemory::new(3).unwrap();
        (0..3).for_each(|_| c.push(0.5, empty_batch()));
        assert_eq!(c.historical_stats(), HistoryStats::Ready { mu_his: 0.5, sigma_his: 0.0 });

        let mut p = HistoryMemory::new(2).unwrap();
        p.push(0.0, empty_batch());
        p.push(1.0, empty_batch());
        let HistoryStats::Ready { mu_his, sigma_his } = p.historical_stats() else { panic!() };
        assert_eq!(mu_his, 0.5);
        assert!((sigma_his - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn xi_examples() {
        let eps = EPSILON_SIGMA;
        match xi(0.6, 0.5, 0.05, eps) {
            Xi::Value(v) => assert!((v - 2.0).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
        assert_eq!(xi(0.5, 0.5, 0.1, eps), Xi::Value(0.0));
        assert_eq!(xi(0.7, 0.5, 0.0, eps), Xi::Skip(SkipReason::ZeroVarianceHistory));
        assert_eq!(SkipReason::ZeroVarianceHistory.to_string(), "zero-variance history");
    }

    #[test]
    fn phi_examples() {
        assert_eq!(phi_lambda(2.0, 0.1).unwrap(), 2.0);
        assert!((phi_lambda(-2.0f64, 0.1).unwrap() + 0.2).abs() < 1e-15);
        assert_eq!(phi_lambda(0.0, 0.7).unwrap(), 0.0);
        assert!(phi_lambda(1.0, 1.5).is_err());
        assert!(phi_lambda(1.0, -0.1).is_err());
    }

    #[test]
    fn normalized_local_examples() {
        let a = grpo_advantages::<f64>(&[1, 0]).unwrap().values;
        assert_eq!(normalized_local_advantages(&a).unwrap(), vec![1.0, -1.0]);

        let a = grpo_advantages::<f64>(&[1, 0, 0, 0]).unwrap().values;
        let l = normalized_local_advantages(&a).unwrap();
        assert!((l[0] - 2.0).abs() < 1e-12);
        assert!(l[1..].iter().all(|&v| (v + 2.0 / 3.0).abs() < 1e-12));

        let a = grpo_advantages::<f64>(&[1, 1, 0, 0, 0, 0, 0, 0]).unwrap().values;
        let l = normalized_local_advantages(&a).unwrap();
        assert!((l[0] - 2.0).abs() < 1e-12 && (l[2] + 2.0 / 3.0).abs() < 1e-12);

        assert!(normalized_local_advantages(&[0.0f64; 4]).is_none());
    }

    #[test]
    fn pi_reward_examples() {
        let pair = grpo_advantages::<f64>(&[1, 0]).unwrap().values;
        assert_eq!(pi_rewards(std::slice::from_ref(&pair), 2.0).groups, vec![Some(vec![2.0, -2.0])]);
        assert_eq!(pi_rewards(&[pair], 0.0).groups, vec![Some(vec![0.0, -0.0])]);

        let one_of_four = grpo_advantages::<f64>(&[1, 0, 0, 0]).unwrap().values;
        let phi = phi_lambda(-2.0, 0.1).unwrap();
        let r = pi_rewards(&[one_of_four], phi).groups[0].clone().unwrap();
        assert!((r[0] + 0.4).abs() < 1e-12);
        assert!(r[1..].iter().all(|&v| (v - 0.4 / 3.0).abs() < 1e-12));

        let dead = vec![0.0f64; 4];
        assert_eq!(pi_rewards(&[dead], 1.0).groups, vec![None]);
    }

    #[test]
    fn smoothed_improvement_examples() {
        let mut m = HistoryMemory::new(2).unwrap();
        m.push(0.2, empty_batch());
        assert_eq!(smoothed_improvement(0.5, &m), None);
        m.push(0.4, empty_batch());
        assert!((smoothed_improvement(0.5, &m).unwrap() - 0.2).abs() < 1e-15);
        assert!((smoothed_improvement(0.3, &m).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn telescoping_examples() {
        let (l, r) = telescoping_check(&[0.3f64, 0.4, 0.35, 0.5]).unwrap();
        assert!((l - 0.2).abs() < 1e-15 && (r - 0.2).abs() < 1e-15);
        assert_eq!(telescoping_check(&[0.7f64; 5]).unwrap(), (0.0, 0.0));
        assert!(telescoping_check(&[0.7]).is_err());
    }

    #[test]
    fn weighted_sum_constant_sequence() {
        let c = 0.6f64;
        let k = 4;
        let id = weighted_sum_identity(c, &[c; 10], k).unwrap();
        let weight_sum = (0..k).map(|i| (k - i) as f64 / k as f64).sum::<f64>();
        assert!(id.lhs.abs() < 1e-15);
        assert!((id.rhs - id.c_init - c * weight_sum).abs() < 1e-15);
        assert!((id.c_init + c * weight_sum).abs() < 1e-15);
    }

    #[test]
    fn weighted_sum_window_one_is_telescoping() {
        let traj = [0.2f64, 0.5, 0.1, 0.9];
        let id = weighted_sum_identity(0.3, &traj, 1).unwrap();
        assert_eq!(id.c_init, -0.3);
        assert!((id.rhs - (0.9 - 0.3)).abs() < 1e-15);
        assert!((id.lhs - id.rhs).abs() < 1e-15);
    }

    #[test]
    fn weighted_sum_needs_long_trajectory() {
        assert!(weighted_sum_identity(0.0, &[0.1, 0.2, 0.3], 3).is_err());
    }
}
