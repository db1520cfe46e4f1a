//! Group rollouts and intra-group statistics.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::env::{sample_response, QuerySpace, SoftmaxPolicy};
use crate::error::{domain, LabError, Result};
use crate::rng::{slot, Streams};
use crate::scalar::Real;

/// `G` responses to one query, with binary rewards and the log-probabilities
/// the sampling policy assigned to them.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupRollout<T> {
    pub query_id: u64,
    pub answers: Vec<usize>,
    pub rewards: Vec<u8>,
    pub behavior_log_probs: Vec<T>,
}

impl<T: Real> GroupRollout<T> {
    pub fn new(query_id: u64, answers: Vec<usize>, rewards: Vec<u8>, behavior_log_probs: Vec<T>) -> Result<Self> {
        if answers.len() != rewards.len() || answers.len() != behavior_log_probs.len() {
            return Err(LabError::Shape(format!(
                "group for query {query_id}: {} answers, {} rewards, {} log-probs",
                answers.len(),
                rewards.len(),
                behavior_log_probs.len()
            )));
        }
        if answers.len() < 2 {
            return domain(format!("group for query {query_id} needs at least two responses"));
        }
        check_binary(&rewards)?;
        Ok(Self {
            query_id,
            answers,
            rewards,
            behavior_log_probs,
        })
    }

    pub fn size(&self) -> usize {
        self.rewards.len()
    }

    pub fn successes(&self) -> usize {
        self.rewards.iter().filter(|&&r| r == 1).count()
    }

    pub fn is_degenerate(&self) -> bool {
        let s = self.successes();
        s == 0 || s == self.size()
    }

    pub fn stats(&self) -> GroupStats<T> {
        group_stats(&self.rewards).expect("validated at construction")
    }

    pub fn advantages(&self) -> Advantages<T> {
        grpo_advantages(&self.rewards).expect("validated at construction")
    }
}

fn check_binary(rewards: &[u8]) -> Result<()> {
    match rewards.iter().find(|&&r| r > 1) {
        Some(r) => domain(format!("reward {r} is not binary")),
        None => Ok(()),
    }
}

/// Mean, population standard deviation and success count of one group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupStats<T> {
    pub mu: T,
    pub sigma: T,
    pub successes: usize,
    pub degenerate: bool,
}

/// Uses the population (1/G) standard deviation; for binary rewards
/// `sigma^2 = S (G - S) / G^2`.
pub fn group_stats<T: Real>(rewards: &[u8]) -> Result<GroupStats<T>> {
    if rewards.len() < 2 {
        return domain("group statistics need at least two rewards");
    }
    check_binary(rewards)?;
    let g = rewards.len();
    let s = rewards.iter().filter(|&&r| r == 1).count();
    let gt = T::from_count(g);
    Ok(GroupStats {
        mu: T::from_count(s) / gt,
        sigma: T::from_count(s * (g - s)).sqrt() / gt,
        successes: s,
        degenerate: s == 0 || s == g,
    })
}

/// Group-relative advantages. Degenerate groups get all zeros and the flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Advantages<T> {
    pub values: Vec<T>,
    pub degenerate: bool,
}

/// `A_i = (R_i - mu) / sigma`. With binary rewards this takes exactly two
/// values, so it is evaluated through [`discrete_advantages`].
pub fn grpo_advantages<T: Real>(rewards: &[u8]) -> Result<Advantages<T>> {
    let stats = group_stats::<T>(rewards)?;
    if stats.degenerate {
        return Ok(Advantages {
            values: vec![T::zero(); rewards.len()],
            degenerate: true,
        });
    }
    let (plus, minus) = discrete_advantages::<T>(rewards.len(), stats.successes)?;
    Ok(Advantages {
        values: rewards.iter().map(|&r| if r == 1 { plus } else { minus }).collect(),
        degenerate: false,
    })
}

/// `(A+, A-) = (sqrt((G-S)/S), -sqrt(S/(G-S)))` for `1 <= S <= G-1`.
pub fn discrete_advantages<T: Real>(group_size: usize, successes: usize) -> Result<(T, T)> {
    if successes == 0 || successes >= group_size {
        return domain(format!(
            "degenerate group: {successes} successes out of {group_size}"
        ));
    }
    let s = T::from_count(successes);
    let f = T::from_count(group_size - successes);
    Ok(((f / s).sqrt(), -(s / f).sqrt()))
}

/// `Z = sum |A_i|`; equals `2 sqrt(S (G - S))` for binary rewards.
pub fn abs_advantage_sum<T: Real>(advantages: &[T]) -> T {
    advantages.iter().map(|a| a.abs()).sum()
}

/// One iteration's groups. Every group has the same size.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchRollout<T> {
    pub groups: Vec<GroupRollout<T>>,
    pub iteration: u64,
}

impl<T: Real> BatchRollout<T> {
    pub fn new(groups: Vec<GroupRollout<T>>, iteration: u64) -> Result<Self> {
        if let Some(first) = groups.first() {
            let g = first.size();
            if groups.iter().any(|gr| gr.size() != g) {
                return Err(LabError::Shape("groups in a batch must share one size".into()));
            }
        }
        Ok(Self { groups, iteration })
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn group_size(&self) -> Option<usize> {
        self.groups.first().map(GroupRollout::size)
    }

    /// Batch mean reward over every sampled response.
    pub fn mean_reward(&self) -> T {
        let n: usize = self.groups.iter().map(GroupRollout::size).sum();
        if n == 0 {
            return T::zero();
        }
        let s: usize = self.groups.iter().map(GroupRollout::successes).sum();
        T::from_count(s) / T::from_count(n)
    }

    pub fn degenerate_count(&self) -> usize {
        self.groups.iter().filter(|g| g.is_degenerate()).count()
    }

    /// Writes one JSON object per group.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for g in &self.groups {
            let line = GroupLine {
                query_id: g.query_id,
                answers: g.answers.clone(),
                rewards: g.rewards.clone(),
                log_probs: g.behavior_log_probs.iter().map(|v| v.to_f64_lossy()).collect(),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R, iteration: u64) -> Result<Self> {
        let mut groups = Vec::new();
        for (n, line) in input.lines().enumerate() {
            let line = line.map_err(|e| LabError::Parse(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let g: GroupLine =
                serde_json::from_str(&line).map_err(|e| LabError::Parse(format!("line {}: {e}", n + 1)))?;
            groups.push(GroupRollout::new(
                g.query_id,
                g.answers,
                g.rewards,
                g.log_probs.into_iter().map(T::lit).collect(),
            )?);
        }
        Self::new(groups, iteration)
    }
}

#[derive(Serialize, Deserialize)]
struct GroupLine {
    query_id: u64,
    answers: Vec<usize>,
    rewards: Vec<u8>,
    log_probs: Vec<f64>,
}

/// Result of dropping degenerate groups.
#[derive(Debug, Clone, PartialEq)]
pub struct FilteredBatch<T> {
    pub batch: BatchRollout<T>,
    pub removed: usize,
    pub all_degenerate: bool,
}

pub fn filter_degenerate<T: Real>(batch: &BatchRollout<T>) -> FilteredBatch<T> {
    let kept: Vec<_> = batch.groups.iter().filter(|g| !g.is_degenerate()).cloned().collect();
    let removed = batch.len() - kept.len();
    FilteredBatch {
        all_degenerate: kept.is_empty() && !batch.is_empty(),
        batch: BatchRollout {
            groups: kept,
            iteration: batch.iteration,
        },
        removed,
    }
}

/// Draws `batch_size` queries from the space's weights and rolls each out
/// `group_size` times under `policy`. Group `b` of iteration `t` reads only
/// the streams `(t, b, QUERY)` and `(t, b, RESPONSES)`.
pub fn sample_batch<T: Real>(
    policy: &SoftmaxPolicy<T>,
    space: &QuerySpace,
    batch_size: usize,
    group_size: usize,
    streams: &Streams,
    iteration: u64,
) -> Result<BatchRollout<T>> {
    if batch_size == 0 {
        return domain("batch size must be at least 1");
    }
    if group_size < 2 {
        return domain("group size must be at least 2");
    }
    let groups = (0..batch_size)
        .map(|b| {
            let mut pick = streams.at(iteration, b as u64, slot::QUERY);
            let query = &space.queries()[space.sample_index(&mut pick)];
            let mut rng = streams.at(iteration, b as u64, slot::RESPONSES);
            let mut answers = Vec::with_capacity(group_size);
            let mut rewards = Vec::with_capacity(group_size);
            let mut log_probs = Vec::with_capacity(group_size);
            for _ in 0..group_size {
                let r = sample_response(policy, query, &mut rng)?;
                answers.push(r.answer);
                rewards.push(r.reward);
                log_probs.push(r.log_prob);
            }
            GroupRollout::new(query.id, answers, rewards, log_probs)
        })
        .collect::<Result<Vec<_>>>()?;
    BatchRollout::new(groups, iteration)
}
