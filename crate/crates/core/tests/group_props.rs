mod common;

use pirl_core::group::{abs_advantage_sum, discrete_advantages};
use pirl_core::{filter_degenerate, group_stats, grpo_advantages, sample_batch, Batch, Group, Policy, Streams};
use proptest::prelude::*;

fn rewards_strategy() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..=1, 2..=64)
}

fn group_from(id: u64, rewards: Vec<u8>) -> Group {
    let g = rewards.len();
    let answers = rewards.iter().map(|&r| usize::from(r == 0)).collect();
    Group::new(id, answers, rewards, vec![-0.5; g]).unwrap()
}

#[test]
fn abs_sum_identity_exhaustive() {
    for g in 2..=64usize {
        for s in 1..g {
            let mut rewards = vec![0u8; g];
            rewards[..s].fill(1);
            let adv = grpo_advantages::<f64>(&rewards).unwrap().values;
            let z = abs_advantage_sum(&adv);
            let expected = 2.0 * ((s * (g - s)) as f64).sqrt();
            assert!((z - expected).abs() <= 1e-12 * expected, "G={g} S={s}: {z} vs {expected}");
        }
    }
}

#[test]
fn degenerate_rate_at_half_is_one_in_128() {
    let space = common::single_answer_space(1, 2);
    let policy = Policy::uniform(&space);
    let streams = Streams::new(2024);
    let n = 100_000u64;
    let degenerate: usize = (0..n)
        .map(|t| sample_batch(&policy, &space, 1, 8, &streams, t).unwrap().degenerate_count())
        .sum();
    let p = 1.0 / 128.0;
    let mean = n as f64 * p;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    assert!(
        (degenerate as f64 - mean).abs() <= 3.0 * sd,
        "{degenerate} degenerate groups, expected {mean} +- {}",
        3.0 * sd
    );
}

proptest! {
    #[test]
    fn advantages_are_centered_and_unit_scaled(rewards in rewards_strategy()) {
        let adv = grpo_advantages::<f64>(&rewards).unwrap();
        let stats = group_stats::<f64>(&rewards).unwrap();
        let g = rewards.len() as f64;
        let s = rewards.iter().filter(|&&r| r == 1).count();
        prop_assert_eq!(stats.degenerate, stats.sigma == 0.0);
        prop_assert_eq!(stats.mu, s as f64 / g);
        prop_assert!((stats.sigma.powi(2) - (s as f64) * (g - s as f64) / (g * g)).abs() < 1e-15);
        if adv.degenerate {
            prop_assert!(adv.values.iter().all(|&a| a == 0.0));
        } else {
            let mean = adv.values.iter().sum::<f64>() / g;
            let var = adv.values.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / g;
            prop_assert!(mean.abs() < 1e-12);
            prop_assert!((var.sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn advantages_take_the_two_discrete_values(rewards in rewards_strategy()) {
        let g = rewards.len();
        let s = rewards.iter().filter(|&&r| r == 1).count();
        prop_assume!(s > 0 && s < g);
        let (plus, minus) = discrete_advantages::<f64>(g, s).unwrap();
        let adv = grpo_advantages::<f64>(&rewards).unwrap().values;
        for (a, r) in adv.iter().zip(&rewards) {
            prop_assert_eq!(*a, if *r == 1 { plus } else { minus });
        }
    }

    #[test]
    fn filtering_keeps_exactly_the_informative_groups(groups in prop::collection::vec(prop::collection::vec(0u8..=1, 6), 1..12)) {
        let batch = Batch::new(
            groups.into_iter().enumerate().map(|(i, r)| group_from(i as u64, r)).collect(),
            3,
        ).unwrap();
        let filtered = filter_degenerate(&batch);
        let kept: Vec<&Group> = batch.groups.iter().filter(|g| !g.is_degenerate()).collect();
        prop_assert_eq!(filtered.batch.groups.iter().collect::<Vec<_>>(), kept);
        prop_assert_eq!(filtered.removed, batch.degenerate_count());
        prop_assert_eq!(filtered.all_degenerate, filtered.batch.is_empty());
        prop_assert_eq!(filtered.batch.iteration, 3);
    }

    #[test]
    fn jsonl_round_trips(groups in prop::collection::vec(prop::collection::vec(0u8..=1, 4), 1..6)) {
        let batch = Batch::new(
            groups.into_iter().enumerate().map(|(i, r)| group_from(i as u64, r)).collect(),
            9,
        ).unwrap();
        let mut buf = Vec::new();
        batch.write_jsonl(&mut buf).unwrap();
        prop_assert_eq!(Batch::read_jsonl(buf.as_slice(), 9).unwrap(), batch);
    }
}
