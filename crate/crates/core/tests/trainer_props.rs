mod common;

use pirl_core::group::abs_advantage_sum;
use pirl_core::trainer::{measured_scaling_factor, run, verify_contributions};
use pirl_core::{
    effective_scaling_factor, explore_gradient, ideal_gradient, phi_lambda, pi_rewards, sample_batch, success_rate,
    verify_gradient, Batch, ClipRange, Config, Group, Policy, QuerySpace, QuerySpec, SkipReason, StoredBatch, Streams,
    Variant,
};
use proptest::prelude::*;

fn two_answer(theta: f64) -> (QuerySpace, Policy) {
    let space = QuerySpace::uniform(vec![QuerySpec::new(0, 2, [0]).unwrap()]).unwrap();
    let policy = Policy::from_logits(&space, vec![vec![theta, 0.0]]).unwrap();
    (space, policy)
}

/// Group with `s` successes first, then `g - s` failures, log-probs taken at `policy`.
fn bernoulli_group(policy: &Policy, g: usize, s: usize) -> Group {
    let answers: Vec<usize> = (0..g).map(|i| usize::from(i >= s)).collect();
    let rewards = answers.iter().map(|&a| u8::from(a == 0)).collect();
    let lp = answers.iter().map(|&a| policy.log_prob(0, a).unwrap()).collect();
    Group::new(0, answers, rewards, lp).unwrap()
}

fn short_config(variant: Variant, seed: u64) -> Config {
    let mut c = Config::new(variant);
    c.batch_size = 4;
    c.group_size = 6;
    c.window = 4;
    c.max_iters = 40;
    c.seed = seed;
    c
}

#[test]
fn explore_gradient_on_a_single_bernoulli_group() {
    let (space, policy) = two_answer(0.7);
    let p = success_rate(&policy, &space.queries()[0]).unwrap();
    let dp = ideal_gradient(&policy, &space).unwrap();
    let g = 8;
    for s in 1..g {
        let batch = Batch::new(vec![bernoulli_group(&policy, g, s)], 0).unwrap();
        let grad = explore_gradient(&policy, &batch, &ClipRange::symmetric(0.2)).unwrap();
        let scale = ((s * (g - s)) as f64).sqrt() / g as f64 / (p * (1.0 - p));
        for (a, b) in grad.row(0).iter().zip(dp.row(0)) {
            assert!((a - scale * b).abs() < 1e-12, "S={s}: {a} vs {}", scale * b);
        }
    }
}

#[test]
fn unit_ratio_verify_gradient_is_independent_of_successes() {
    for theta in [-3.0, -0.4, 0.0, 1.1, 4.0] {
        let (space, policy) = two_answer(theta);
        let p = success_rate(&policy, &space.queries()[0]).unwrap();
        let dp = ideal_gradient(&policy, &space).unwrap();
        for lambda in [0.0, 0.1, 1.0] {
            for xi in [-3.0, -1.0, 0.0, 1.0, 3.0] {
                let phi = phi_lambda(xi, lambda).unwrap();
                for s in 1..8 {
                    let stored = StoredBatch::new(Batch::new(vec![bernoulli_group(&policy, 8, s)], 0).unwrap(), None);
                    let rewards = pi_rewards(&stored.advantages, phi);
                    let v = verify_gradient(&policy, &stored.batch, &rewards, &ClipRange::symmetric(0.2)).unwrap();
                    for (a, b) in v.row(0).iter().zip(dp.row(0)) {
                        let target = phi * b / (2.0 * p * (1.0 - p));
                        assert!((a - target).abs() < 1e-10, "theta={theta} S={s}: {a} vs {target}");
                    }
                }
            }
        }
    }
}

#[test]
fn zero_verify_rate_reproduces_base_variant() {
    let space = common::single_answer_space(5, 4);
    for (base, pipo) in [(Variant::Grpo, Variant::GrpoPipo), (Variant::Dapo, Variant::DapoPipo)] {
        for seed in 0..3 {
            let a = run(short_config(base, seed), &space, Policy::uniform(&space)).unwrap();
            let mut cfg = short_config(pipo, seed);
            cfg.alpha_pi = 0.0;
            let b = run(cfg, &space, Policy::uniform(&space)).unwrap();
            assert_eq!(a.final_policy, b.final_policy);
            assert_eq!(a.final_j, b.final_j);
            for (x, y) in a.records.iter().zip(&b.records) {
                assert_eq!((x.mu_t, x.j_exact, x.grad_norm_explore), (y.mu_t, y.j_exact, y.grad_norm_explore));
                assert_eq!((x.xi, x.phi_xi), (y.xi, y.phi_xi));
            }
            assert!(b.records.iter().any(|r| r.verify_applied));
        }
    }
}

#[test]
fn runs_are_deterministic() {
    let space = common::single_answer_space(3, 5);
    for v in Variant::ALL {
        let a = run(short_config(v, 77), &space, Policy::uniform(&space)).unwrap();
        let b = run(short_config(v, 77), &space, Policy::uniform(&space)).unwrap();
        assert_eq!(a, b);
        let c = run(short_config(v, 78), &space, Policy::uniform(&space)).unwrap();
        assert_ne!(a.records, c.records);
    }
}

#[test]
fn verification_waits_for_a_full_window() {
    let space = common::single_answer_space(4, 3);
    for v in [Variant::GrpoPipo, Variant::DapoPipo] {
        let cfg = short_config(v, 5);
        let k = cfg.window as u64;
        let out = run(cfg, &space, Policy::uniform(&space)).unwrap();
        for r in &out.records {
            if r.t <= k {
                assert!(!r.verify_applied && r.mu_his.is_none() && r.grad_norm_verify.is_none());
                assert_eq!(r.verify_skip_reason, Some(SkipReason::WarmUp));
            } else {
                assert_ne!(r.verify_skip_reason, Some(SkipReason::WarmUp));
                assert_eq!(r.verify_applied, r.verify_skip_reason.is_none());
                assert_eq!(r.verify_applied, r.grad_norm_verify.is_some());
            }
        }
    }
    let out = run(short_config(Variant::Grpo, 5), &space, Policy::uniform(&space)).unwrap();
    assert!(out.records.iter().all(|r| !r.verify_applied && r.verify_skip_reason.is_none()));
}

#[test]
fn saturated_history_skips_verification() {
    let space = common::single_answer_space(2, 2);
    let policy = Policy::from_logits(&space, vec![vec![30.0, -30.0]; 2]).unwrap();
    let out = run(short_config(Variant::GrpoPipo, 1), &space, policy).unwrap();
    for r in out.records.iter().filter(|r| r.t > 4) {
        assert_eq!(r.verify_skip_reason, Some(SkipReason::ZeroVarianceHistory));
        assert_eq!(r.sigma_his, Some(0.0));
    }
}

#[test]
fn filtered_all_degenerate_batch_is_a_no_op() {
    let space = common::single_answer_space(2, 2);
    let policy = Policy::from_logits(&space, vec![vec![-30.0, 30.0]; 2]).unwrap();
    let out = run(short_config(Variant::DapoPipo, 1), &space, policy.clone()).unwrap();
    assert_eq!(out.final_policy, policy);
    assert!(out.records.iter().all(|r| r.retained_groups == 0 && r.grad_norm_explore == 0.0));
}

fn distinct_query_batch(seed: u64, g: usize) -> Option<(QuerySpace, Policy, Batch)> {
    let (space, policy) = common::random_fixture(seed, 2.0);
    let streams = Streams::new(seed);
    let groups: Vec<Group> = space
        .queries()
        .iter()
        .enumerate()
        .filter_map(|(i, q)| {
            let single = QuerySpace::uniform(vec![q.clone()]).ok()?;
            let sub = Policy::from_logits(&single, vec![policy.logits().row(i).to_vec()]).ok()?;
            let b = sample_batch(&sub, &single, 1, g, &streams, i as u64).ok()?;
            b.groups.into_iter().next()
        })
        .filter(|grp| !grp.is_degenerate())
        .take(1)
        .collect();
    let batch = Batch::new(groups, 0).ok()?;
    (!batch.is_empty()).then_some((space, policy, batch))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn combined_step_projection_matches_scaling_factor(
        seed in any::<u64>(),
        xi in -3.0f64..3.0,
        lambda in 0.0f64..=1.0,
        alpha_std in 0.01f64..0.5,
        alpha_pi in 0.0f64..0.5,
    ) {
        let Some((_, policy, batch)) = distinct_query_batch(seed, 8) else { return Ok(()); };
        let clip = ClipRange::symmetric(0.2);
        let g = explore_gradient(&policy, &batch, &clip).unwrap();
        let stored = StoredBatch::new(batch, Some(g.clone()));
        let phi = phi_lambda(xi, lambda).unwrap();
        let v = verify_gradient(&policy, &stored.batch, &pi_rewards(&stored.advantages, phi), &clip).unwrap();
        let z = abs_advantage_sum(&stored.advantages[0]);
        let k = effective_scaling_factor(alpha_std, alpha_pi, 8, phi, z).unwrap();
        let measured = measured_scaling_factor(alpha_std, alpha_pi, &g, &v).unwrap();
        prop_assert!((measured - k).abs() < 1e-8, "{} vs {}", measured, k);
        if alpha_pi > 0.0 {
            prop_assert_eq!(k > alpha_std, phi > 0.0);
            prop_assert_eq!(k < alpha_std, phi < 0.0);
        }
        let dot = v.dot(&g);
        if phi == 0.0 {
            prop_assert_eq!(dot, 0.0);
        } else {
            prop_assert_eq!(dot.signum(), phi.signum());
        }
    }

    #[test]
    fn clipped_contributions_stay_bounded(
        seed in any::<u64>(),
        shifts in prop::collection::vec(-2.0f64..2.0, 8),
        xi in -3.0f64..3.0,
        eps_high in 0.05f64..0.5,
    ) {
        let Some((_, policy, mut batch)) = distinct_query_batch(seed, 8) else { return Ok(()); };
        for (lp, d) in batch.groups[0].behavior_log_probs.iter_mut().zip(&shifts) {
            *lp += d;
        }
        let clip = ClipRange { low: 0.2, high: eps_high };
        let stored = StoredBatch::new(batch, None);
        let rewards = pi_rewards(&stored.advantages, phi_lambda(xi, 0.1).unwrap());
        let terms = verify_contributions(&policy, &stored.batch, &rewards, &clip).unwrap();
        let group = &stored.batch.groups[0];
        for ((&(r, c), &answer), &behavior) in terms[0].iter().zip(&group.answers).zip(&group.behavior_log_probs) {
            let nu = (policy.log_prob(group.query_id, answer).unwrap() - behavior).exp();
            let cap = 1.0 + eps_high;
            prop_assert!(c.abs() <= nu.max(cap) * r.abs() * (1.0 + 1e-12));
            if r >= 0.0 || nu <= cap {
                prop_assert!(c.abs() <= cap * r.abs() * (1.0 + 1e-12), "nu={} r={} c={}", nu, r, c);
            }
        }
    }
}
