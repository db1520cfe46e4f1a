#![allow(dead_code)]

use pirl_core::{Policy, QuerySpace, QuerySpec};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random query space with 1..=5 queries of 2..=8 answers, non-uniform
/// weights, and a softmax policy with logits in `[-scale, scale]`.
pub fn random_fixture(seed: u64, scale: f64) -> (QuerySpace, Policy) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=5);
    let mut queries = Vec::with_capacity(n);
    let mut logits = Vec::with_capacity(n);
    for id in 0..n as u64 {
        let v = rng.gen_range(2..=8);
        let c = rng.gen_range(1..v);
        let correct = sample(&mut rng, v, c).into_vec();
        queries.push(QuerySpec::new(id * 7 + 3, v, correct).unwrap());
        logits.push((0..v).map(|_| rng.gen_range(-scale..=scale)).collect());
    }
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let weights = raw.iter().map(|w| w / total).collect();
    let space = QuerySpace::new(queries, weights).unwrap();
    let policy = Policy::from_logits(&space, logits).unwrap();
    (space, policy)
}

/// Query space where every query has `vocab_size` answers and answer 0 correct.
pub fn single_answer_space(num_queries: usize, vocab_size: usize) -> QuerySpace {
    let queries = (0..num_queries as u64)
        .map(|id| QuerySpec::new(id, vocab_size, [0]).unwrap())
        .collect();
    QuerySpace::uniform(queries).unwrap()
}
