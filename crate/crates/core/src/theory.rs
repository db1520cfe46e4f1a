//! Distortion factor of group-normalized gradients and Monte Carlo checks.
//!
//! Conditioned on a non-degenerate group, the expected group-relative update
//! is `eta(p) * grad p` with
//!
//! ```text
//! eta(p) = sum_{k=1}^{G-1} sqrt(k (G-k)) C(G,k) p^k (1-p)^(G-k)
//!          / [ G p (1-p) (1 - p^G - (1-p)^G) ]
//! ```
//!
//! which blows up like `sqrt(G-1) / (G p (1-p))` at both boundaries.

use rayon::prelude::*;

use crate::env::RolloutModel;
use crate::error::{domain, LabError, Result};
use crate::group::grpo_advantages;
use crate::pirl::{normalized_local_advantages, phi_lambda};
use crate::rng::{slot, Streams};
use crate::scalar::{Moments, Real};

/// Minimum number of groups accepted by the Monte Carlo estimators.
pub const MIN_MC_GROUPS: usize = 1000;

/// Groups per parallel work unit. Each chunk owns one random stream.
const MC_CHUNK: usize = 4096;

/// Relative slack added to standard-error bands so zero-variance estimators
/// are compared at rounding precision.
pub const SE_BAND_FLOOR: f64 = 1e-12;

/// `|estimate - target| <= n_se * standard_error + SE_BAND_FLOOR * |target|`.
pub fn within_standard_errors<T: Real>(estimate: T, standard_error: T, target: T, n_se: T) -> bool {
    (estimate - target).abs() <= n_se * standard_error + T::lit(SE_BAND_FLOOR) * target.abs()
}

fn check_probability<T: Real>(p: T, open: bool) -> Result<()> {
    let inside = if open {
        p > T::zero() && p < T::one()
    } else {
        p >= T::zero() && p <= T::one()
    };
    if inside {
        Ok(())
    } else {
        domain(format!("probability {p} outside {}", if open { "(0, 1)" } else { "[0, 1]" }))
    }
}

/// `ln C(n, k)` by a running product of ratios; exact enough for n in the thousands.
fn ln_choose<T: Real>(n: usize, k: usize) -> T {
    let k = k.min(n - k);
    (1..=k).fold(T::zero(), |acc, j| {
        acc + (T::from_count(n - k + j) / T::from_count(j)).ln()
    })
}

/// `C(G,k) p^k (1-p)^(G-k)`, evaluated in log space.
pub fn binomial_pmf<T: Real>(group_size: usize, k: usize, p: T) -> Result<T> {
    if k > group_size {
        return domain(format!("k = {k} exceeds G = {group_size}"));
    }
    check_probability(p, false)?;
    if p == T::zero() {
        return Ok(if k == 0 { T::one() } else { T::zero() });
    }
    if p == T::one() {
        return Ok(if k == group_size { T::one() } else { T::zero() });
    }
    let log = ln_choose::<T>(group_size, k)
        + T::from_count(k) * p.ln()
        + T::from_count(group_size - k) * (-p).ln_1p();
    Ok(log.exp())
}

/// `P(1 <= S <= G-1) = 1 - p^G - (1-p)^G`, without cancellation near the boundaries.
pub fn nondegenerate_prob<T: Real>(group_size: usize, p: T) -> Result<T> {
    check_probability(p, false)?;
    let edge = p.min(T::one() - p);
    let g = T::from_count(group_size);
    Ok(-(g * (-edge).ln_1p()).exp_m1() - edge.powi(group_size as i32))
}

/// Exact distortion factor.
pub fn eta_exact<T: Real>(group_size: usize, p: T) -> Result<T> {
    if group_size < 2 {
        return domain("eta needs G >= 2");
    }
    check_probability(p, true)?;
    let lp = p.ln();
    let lq = (-p).ln_1p();
    let mut ln_c = T::zero();
    let mut numerator = T::zero();
    for k in 1..group_size {
        // C(G,k) = C(G,k-1) (G-k+1)/k
        ln_c = ln_c + (T::from_count(group_size - k + 1) / T::from_count(k)).ln();
        let weight = T::from_count(k * (group_size - k)).sqrt();
        numerator = numerator
            + weight * (ln_c + T::from_count(k) * lp + T::from_count(group_size - k) * lq).exp();
    }
    let denominator = T::from_count(group_size) * p * (T::one() - p) * nondegenerate_prob(group_size, p)?;
    Ok(numerator / denominator)
}

/// Boundary asymptote `sqrt(G-1) / (G p (1-p))`.
pub fn eta_asymptotic<T: Real>(group_size: usize, p: T) -> Result<T> {
    if group_size < 2 {
        return domain("eta needs G >= 2");
    }
    check_probability(p, true)?;
    Ok(T::from_count(group_size - 1).sqrt() / (T::from_count(group_size) * p * (T::one() - p)))
}

/// Closed-form quantities at one `(G, p)` cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EtaEvaluation<T> {
    pub group_size: usize,
    pub p: T,
    pub eta_exact: T,
    pub eta_asymptotic: T,
    pub nondegenerate_prob: T,
}

impl<T: Real> EtaEvaluation<T> {
    pub fn at(group_size: usize, p: T) -> Result<Self> {
        Ok(Self {
            group_size,
            p,
            eta_exact: eta_exact(group_size, p)?,
            eta_asymptotic: eta_asymptotic(group_size, p)?,
            nondegenerate_prob: nondegenerate_prob(group_size, p)?,
        })
    }
}

/// Conditional (non-degenerate) Monte Carlo estimate of a per-group gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct McGradientReport<T> {
    pub estimate: Vec<T>,
    pub standard_error: Vec<T>,
    /// Sample standard deviation across retained groups, per component.
    pub spread: Vec<T>,
    pub samples_used: usize,
    pub degenerate_discarded: usize,
}

impl<T: Real> McGradientReport<T> {
    pub fn total_groups(&self) -> usize {
        self.samples_used + self.degenerate_discarded
    }

    /// Component-wise `estimate / reference` with its standard error.
    pub fn ratio_to(&self, reference: &[T]) -> Vec<(T, T)> {
        self.estimate
            .iter()
            .zip(&self.standard_error)
            .zip(reference)
            .map(|((&e, &se), &r)| (e / r, se / r.abs()))
            .collect()
    }

    pub fn norm(&self) -> T {
        self.estimate.iter().map(|&v| v * v).sum::<T>().sqrt()
    }
}

/// Draws `num_groups` groups from `model`, drops degenerate ones, and turns
/// each retained group into a per-group gradient with `per_group`.
fn conditional_mc<T, M, F>(
    model: &M,
    group_size: usize,
    num_groups: usize,
    streams: &Streams,
    cell: u64,
    per_group: F,
) -> Result<McGradientReport<T>>
where
    T: Real,
    M: RolloutModel<T>,
    F: Fn(&[u8], &[Vec<T>]) -> Vec<T> + Sync,
{
    if group_size < 2 {
        return domain("group size must be at least 2");
    }
    if num_groups < MIN_MC_GROUPS {
        return domain(format!("need at least {MIN_MC_GROUPS} groups, got {num_groups}"));
    }
    let dim = model.dim();
    let chunks = num_groups.div_ceil(MC_CHUNK);
    let partials: Vec<(Vec<Moments<T>>, usize)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = streams.at(cell, c as u64, slot::RESPONSES);
            let groups_here = MC_CHUNK.min(num_groups - c * MC_CHUNK);
            let mut moments = vec![Moments::default(); dim];
            let mut discarded = 0;
            let mut rewards = Vec::with_capacity(group_size);
            let mut scores = Vec::with_capacity(group_size);
            for _ in 0..groups_here {
                rewards.clear();
                scores.clear();
                for _ in 0..group_size {
                    let r = model.draw(&mut rng);
                    rewards.push(r.reward);
                    scores.push(model.score(r.answer));
                }
                let s = rewards.iter().filter(|&&r| r == 1).count();
                if s == 0 || s == group_size {
                    discarded += 1;
                    continue;
                }
                for (m, v) in moments.iter_mut().zip(per_group(&rewards, &scores)) {
                    m.push(v);
                }
            }
            (moments, discarded)
        })
        .collect();

    let mut total = vec![Moments::default(); dim];
    let mut discarded = 0;
    for (moments, d) in &partials {
        for (acc, m) in total.iter_mut().zip(moments) {
            *acc = acc.merge(m);
        }
        discarded += d;
    }
    let used = total.first().map_or(0, |m| m.count as usize);
    if used == 0 {
        return Err(LabError::Estimation(format!(
            "all {num_groups} groups were degenerate"
        )));
    }
    Ok(McGradientReport {
        estimate: total.iter().map(|m| m.mean).collect(),
        standard_error: total.iter().map(Moments::standard_error).collect(),
        spread: total.iter().map(|m| m.sample_variance().sqrt()).collect(),
        samples_used: used,
        degenerate_discarded: discarded,
    })
}

/// `(1/G) sum_i w_i * score_i`.
fn weighted_score_mean<T: Real>(weights: &[T], scores: &[Vec<T>]) -> Vec<T> {
    let dim = scores.first().map_or(0, Vec::len);
    let g = T::from_count(weights.len());
    (0..dim)
        .map(|d| {
            weights
                .iter()
                .zip(scores)
                .fold(T::zero(), |acc, (&w, s)| acc + w * s[d])
                / g
        })
        .collect()
}

/// Monte Carlo estimate of the expected group-relative gradient conditioned on
/// a non-degenerate group: the average of `(1/G) sum_i A_i grad log pi(y_i)`.
pub fn mc_grpo_gradient<T: Real, M: RolloutModel<T>>(
    model: &M,
    group_size: usize,
    num_groups: usize,
    streams: &Streams,
    cell: u64,
) -> Result<McGradientReport<T>> {
    conditional_mc(model, group_size, num_groups, streams, cell, |rewards, scores| {
        let adv = grpo_advantages::<T>(rewards).expect("binary rewards");
        weighted_score_mean(&adv.values, scores)
    })
}

/// Monte Carlo estimate of the verification gradient at unit importance ratio,
/// with policy-improvement rewards built from a fixed improvement signal `xi`.
pub fn mc_verify_gradient<T: Real, M: RolloutModel<T>>(
    model: &M,
    group_size: usize,
    xi: T,
    lambda: T,
    num_groups: usize,
    streams: &Streams,
    cell: u64,
) -> Result<McGradientReport<T>> {
    let phi = phi_lambda(xi, lambda)?;
    conditional_mc(model, group_size, num_groups, streams, cell, |rewards, scores| {
        let adv = grpo_advantages::<T>(rewards).expect("binary rewards");
        let local = normalized_local_advantages(&adv.values).expect("non-degenerate group");
        let pi: Vec<T> = local.iter().map(|&a| a * phi).collect();
        weighted_score_mean(&pi, scores)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::BernoulliTask;

    #[test]
    fn pmf_examples() {
        assert!((binomial_pmf(2, 1, 0.5f64).unwrap() - 0.5).abs() < 1e-15);
        assert!((binomial_pmf(8, 0, 0.5f64).unwrap() - 1.0 / 256.0).abs() < 1e-17);
        assert_eq!(binomial_pmf(5, 0, 0.0f64).unwrap(), 1.0);
        assert_eq!(binomial_pmf(5, 5, 1.0f64).unwrap(), 1.0);
        assert!(binomial_pmf(5, 6, 0.5f64).is_err());
        assert!(binomial_pmf(5, 2, 1.5f64).is_err());
    }

    #[test]
    fn pmf_reaches_large_groups() {
        let total: f64 = (0..=1024).map(|k| binomial_pmf(1024, k, 0.37).unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn nondegenerate_examples() {
        assert!((nondegenerate_prob(2, 0.5f64).unwrap() - 0.5).abs() < 1e-15);
        assert!((nondegenerate_prob(8, 0.5f64).unwrap() - 127.0 / 128.0).abs() < 1e-15);
        assert!(nondegenerate_prob(8, 1e-12f64).unwrap() < 1e-10);
        assert_eq!(nondegenerate_prob(8, 0.0f64).unwrap(), 0.0);
    }

    #[test]
    fn eta_pair_closed_form() {
        assert!((eta_exact(2, 0.5f64).unwrap() - 2.0).abs() < 1e-12);
        for i in 1..=9 {
            let p = i as f64 / 10.0;
            let want = 1.0 / (2.0 * p * (1.0 - p));
            assert!((eta_exact(2, p).unwrap() - want).abs() < 1e-12, "p = {p}");
        }
    }

    #[test]
    fn eta_rejects_boundaries() {
        assert!(eta_exact(8, 0.0f64).is_err());
        assert!(eta_exact(8, 1.0f64).is_err());
        assert!(eta_exact(1, 0.5f64).is_err());
    }

    #[test]
    fn asymptote_examples() {
        let a = eta_asymptotic(8, 0.001f64).unwrap();
        assert!((a - 7f64.sqrt() / (8.0 * 0.001 * 0.999)).abs() < 1e-9);
        assert!((a - 331.05).abs() < 0.001);
        assert_eq!(eta_asymptotic(2, 0.5f64).unwrap(), 2.0);
        let ratio = eta_exact(8, 1e-3f64).unwrap() / a;
        assert!((ratio - 1.0).abs() < 0.01, "{ratio}");
    }

    #[test]
    fn mc_requires_enough_groups() {
        let task = BernoulliTask::new(0.0f64).unwrap();
        assert!(mc_grpo_gradient(&task, 4, 999, &Streams::new(0), 0).is_err());
    }

    #[test]
    fn mc_reports_failure_when_everything_is_degenerate() {
        // p = 1 - 1e-30 in f64 rounds to exactly 1: every group is all-success.
        let task = BernoulliTask::new(80.0f64).unwrap();
        let err = mc_grpo_gradient(&task, 4, 2000, &Streams::new(0), 0).unwrap_err();
        assert!(matches!(err, LabError::Estimation(_)));
    }

    #[test]
    fn mc_bookkeeping_adds_up() {
        let task = BernoulliTask::with_success_probability(0.2f64).unwrap();
        let r = mc_grpo_gradient(&task, 4, 10_000, &Streams::new(8), 1).unwrap();
        assert_eq!(r.total_groups(), 10_000);
        assert!(r.degenerate_discarded > 0);
    }

    #[test]
    fn mc_is_reproducible() {
        let task = BernoulliTask::with_success_probability(0.3f64).unwrap();
        let a = mc_grpo_gradient(&task, 8, 20_000, &Streams::new(4), 2).unwrap();
        let b = mc_grpo_gradient(&task, 8, 20_000, &Streams::new(4), 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn verify_gradient_zero_signal() {
        let task = BernoulliTask::with_success_probability(0.4f64).unwrap();
        let r = mc_verify_gradient(&task, 8, 0.0, 0.1, 5000, &Streams::new(1), 0).unwrap();
        assert_eq!(r.estimate, vec![0.0]);
    }
}
