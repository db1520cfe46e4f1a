//! Synthetic verifiable-reward environments.
//!
//! Each query has a finite answer vocabulary and a fixed accept set, and the
//! policy is a per-query softmax over answers. That makes the success rate,
//! the expected-reward objective and its gradient available in closed form,
//! which is what every other module checks itself against.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, LabError, Result};
use crate::scalar::Real;

/// Logits are kept inside `[-LOGIT_LIMIT, LOGIT_LIMIT]`.
pub const LOGIT_LIMIT: f64 = 30.0;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// One query and its verifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub id: u64,
    pub vocab_size: usize,
    pub correct_set: Vec<usize>,
}

impl QuerySpec {
    /// Validated constructor: `0 < |correct_set| < vocab_size`, indices in range.
    pub fn new(id: u64, vocab_size: usize, correct: impl IntoIterator<Item = usize>) -> Result<Self> {
        let spec = Self::unchecked(id, vocab_size, correct);
        spec.validate()?;
        Ok(spec)
    }

    /// Builds a spec without the proper-subset check. Only for test fixtures
    /// that need a saturated verifier (every answer accepted).
    pub fn unchecked(id: u64, vocab_size: usize, correct: impl IntoIterator<Item = usize>) -> Self {
        let correct_set: BTreeSet<usize> = correct.into_iter().collect();
        Self {
            id,
            vocab_size,
            correct_set: correct_set.into_iter().collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return domain(format!("query {}: vocab_size must be >= 2", self.id));
        }
        if self.correct_set.is_empty() || self.correct_set.len() >= self.vocab_size {
            return domain(format!(
                "query {}: correct set must be a non-empty proper subset of the vocabulary",
                self.id
            ));
        }
        if let Some(&bad) = self.correct_set.iter().find(|&&a| a >= self.vocab_size) {
            return domain(format!("query {}: answer {bad} out of range", self.id));
        }
        Ok(())
    }

    /// The deterministic verifier.
    pub fn is_correct(&self, answer: usize) -> bool {
        self.correct_set.binary_search(&answer).is_ok()
    }

    pub fn reward(&self, answer: usize) -> u8 {
        u8::from(self.is_correct(answer))
    }
}

/// The query distribution: a list of queries and their sampling weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QuerySpaceFile", into = "QuerySpaceFile")]
pub struct QuerySpace {
    queries: Vec<QuerySpec>,
    weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct QuerySpaceFile {
    queries: Vec<QuerySpec>,
    weights: Vec<f64>,
}

impl TryFrom<QuerySpaceFile> for QuerySpace {
    type Error = LabError;

    fn try_from(file: QuerySpaceFile) -> Result<Self> {
        QuerySpace::new(file.queries, file.weights)
    }
}

impl From<QuerySpace> for QuerySpaceFile {
    fn from(space: QuerySpace) -> Self {
        Self {
            queries: space.queries,
            weights: space.weights,
        }
    }
}

impl QuerySpace {
    pub fn new(queries: Vec<QuerySpec>, weights: Vec<f64>) -> Result<Self> {
        for q in &queries {
            q.validate()?;
        }
        Self::build(queries, weights)
    }

    /// Uniform weights over `queries`.
    pub fn uniform(queries: Vec<QuerySpec>) -> Result<Self> {
        let n = queries.len().max(1);
        Self::new(queries, vec![1.0 / n as f64; n])
    }

    /// Skips per-query validation (weights are still checked). Test fixtures only.
    pub fn unchecked(queries: Vec<QuerySpec>, weights: Vec<f64>) -> Result<Self> {
        Self::build(queries, weights)
    }

    fn build(queries: Vec<QuerySpec>, weights: Vec<f64>) -> Result<Self> {
        if queries.is_empty() {
            return domain("query space must contain at least one query");
        }
        if weights.len() != queries.len() {
            return Err(LabError::Shape(format!(
                "{} weights for {} queries",
                weights.len(),
                queries.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return domain("sampling weights must be finite and non-negative");
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return domain(format!("sampling weights sum to {total}, expected 1"));
        }
        let mut seen = BTreeSet::new();
        if let Some(dup) = queries.iter().find(|q| !seen.insert(q.id)) {
            return domain(format!("duplicate query id {}", dup.id));
        }
        Ok(Self { queries, weights })
    }

    pub fn queries(&self) -> &[QuerySpec] {
        &self.queries
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn query(&self, id: u64) -> Result<&QuerySpec> {
        self.queries
            .iter()
            .find(|q| q.id == id)
            .ok_or_else(|| LabError::Domain(format!("unknown query id {id}")))
    }

    /// Draws a query index from the sampling weights by inverse CDF.
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        categorical_index(self.weights.iter().copied(), u, self.weights.len())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("query space serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| LabError::Parse(e.to_string()))
    }
}

fn categorical_index<T: Real>(probs: impl Iterator<Item = T>, u: T, len: usize) -> usize {
    let mut acc = T::zero();
    let mut last_positive = 0;
    for (i, p) in probs.enumerate() {
        if p > T::zero() {
            last_positive = i;
        }
        acc = acc + p;
        if u < acc {
            return i;
        }
    }
    debug_assert!(len > 0);
    last_positive
}

/// Ragged real matrix indexed `[query row][answer]`. Holds both logits and
/// gradients with respect to them.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMatrix<T> {
    rows: Vec<Vec<T>>,
}

/// Gradient with respect to the logit table.
pub type Gradient<T> = RowMatrix<T>;

impl<T: Real> RowMatrix<T> {
    pub fn from_rows(rows: Vec<Vec<T>>) -> Self {
        Self { rows }
    }

    pub fn zeros_like(shape: &Self) -> Self {
        Self {
            rows: shape.rows.iter().map(|r| vec![T::zero(); r.len()]).collect(),
        }
    }

    pub fn zeros_for(space: &QuerySpace) -> Self {
        Self {
            rows: space
                .queries()
                .iter()
                .map(|q| vec![T::zero(); q.vocab_size])
                .collect(),
        }
    }

    pub fn rows(&self) -> &[Vec<T>] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.rows[i]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.rows[i]
    }

    pub fn into_rows(self) -> Vec<Vec<T>> {
        self.rows
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.rows.len() == other.rows.len()
            && self.rows.iter().zip(&other.rows).all(|(a, b)| a.len() == b.len())
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.rows.iter().flatten()
    }

    pub fn dot(&self, other: &Self) -> T {
        debug_assert!(self.same_shape(other));
        self.iter().zip(other.iter()).fold(T::zero(), |acc, (&a, &b)| acc + a * b)
    }

    pub fn norm(&self) -> T {
        self.dot(self).sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, scale: T, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.rows.iter_mut().flatten().zip(other.iter()) {
            *a = *a + scale * *b;
        }
    }

    pub fn scaled(&self, scale: T) -> Self {
        Self {
            rows: self
                .rows
                .iter()
                .map(|r| r.iter().map(|&v| v * scale).collect())
                .collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.add_scaled(-T::one(), other);
        out
    }
}

/// Per-query softmax policy over answers.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxPolicy<T> {
    ids: Vec<u64>,
    index: HashMap<u64, usize>,
    logits: RowMatrix<T>,
}

impl<T: Real> SoftmaxPolicy<T> {
    /// All-zero logits: uniform answer distribution for every query.
    pub fn uniform(space: &QuerySpace) -> Self {
        Self::assemble(space, RowMatrix::zeros_for(space))
    }

    /// Builds a policy from explicit logits, clamping every entry to
    /// `[-LOGIT_LIMIT, LOGIT_LIMIT]`.
    pub fn from_logits(space: &QuerySpace, logits: Vec<Vec<T>>) -> Result<Self> {
        if logits.len() != space.len() {
            return Err(LabError::Shape(format!(
                "{} logit rows for {} queries",
                logits.len(),
                space.len()
            )));
        }
        for (row, q) in logits.iter().zip(space.queries()) {
            if row.len() != q.vocab_size {
                return Err(LabError::Shape(format!(
                    "query {}: {} logits for vocabulary of {}",
                    q.id,
                    row.len(),
                    q.vocab_size
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return domain(format!("query {}: logits must be finite", q.id));
            }
        }
        let mut m = RowMatrix::from_rows(logits);
        clamp_logits(&mut m);
        Ok(Self::assemble(space, m))
    }

    fn assemble(space: &QuerySpace, logits: RowMatrix<T>) -> Self {
        let ids: Vec<u64> = space.queries().iter().map(|q| q.id).collect();
        let index = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        Self { ids, index, logits }
    }

    pub fn logits(&self) -> &RowMatrix<T> {
        &self.logits
    }

    pub fn query_ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn row_of(&self, id: u64) -> Result<usize> {
        self.index
            .get(&id)
            .copied()
            .ok_or_else(|| LabError::Domain(format!("unknown query id {id}")))
    }

    fn row_for(&self, q: &QuerySpec) -> Result<usize> {
        let row = self.row_of(q.id)?;
        if self.logits.row(row).len() != q.vocab_size {
            return Err(LabError::Shape(format!(
                "query {}: policy row has {} answers, spec has {}",
                q.id,
                self.logits.row(row).len(),
                q.vocab_size
            )));
        }
        Ok(row)
    }

    /// Softmax of one row.
    pub fn probabilities(&self, row: usize) -> Vec<T> {
        softmax(self.logits.row(row))
    }

    /// Exact `log pi(answer | query)`.
    pub fn log_prob(&self, id: u64, answer: usize) -> Result<T> {
        let row = self.row_of(id)?;
        let logits = self.logits.row(row);
        if answer >= logits.len() {
            return domain(format!("answer {answer} out of range for query {id}"));
        }
        Ok(log_softmax_at(logits, answer))
    }

    /// `theta + step * direction`, re-clamped.
    pub fn ascend(&self, direction: &Gradient<T>, step: T) -> Self {
        let mut next = self.clone();
        next.logits.add_scaled(step, direction);
        clamp_logits(&mut next.logits);
        next
    }

    /// Copy with the raw logit table replaced, without clamping. Used by the
    /// finite-difference oracle so perturbations are never swallowed.
    fn with_raw_logits(&self, logits: RowMatrix<T>) -> Self {
        Self {
            ids: self.ids.clone(),
            index: self.index.clone(),
            logits,
        }
    }
}

fn clamp_logits<T: Real>(m: &mut RowMatrix<T>) {
    let lim = T::lit(LOGIT_LIMIT);
    for v in m.rows.iter_mut().flatten() {
        *v = v.max(-lim).min(lim);
    }
}

pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_softmax_at<T: Real>(logits: &[T], answer: usize) -> T {
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let total: T = logits.iter().map(|&v| (v - max).exp()).sum();
    logits[answer] - max - total.ln()
}

/// Splits a row's probability mass into (accepted, rejected) without forming
/// `1 - p` by subtraction.
fn split_mass<T: Real>(probs: &[T], q: &QuerySpec) -> (T, T) {
    probs
        .iter()
        .enumerate()
        .fold((T::zero(), T::zero()), |(c, w), (v, &p)| {
            if q.is_correct(v) {
                (c + p, w)
            } else {
                (c, w + p)
            }
        })
}

/// Exact success probability `p(q; theta)`.
pub fn success_rate<T: Real>(policy: &SoftmaxPolicy<T>, q: &QuerySpec) -> Result<T> {
    let row = policy.row_for(q)?;
    Ok(split_mass(&policy.probabilities(row), q).0)
}

/// Exact expected reward over the query distribution.
pub fn rlvr_objective<T: Real>(policy: &SoftmaxPolicy<T>, space: &QuerySpace) -> Result<T> {
    let mut total = T::zero();
    for (q, &w) in space.queries().iter().zip(space.weights()) {
        total = total + T::lit(w) * success_rate(policy, q)?;
    }
    Ok(total)
}

/// Gradient of one query's success probability with respect to its logit row:
/// `d p / d theta_v = pi_v (1[v in C] - p)`.
pub fn success_gradient_row<T: Real>(probs: &[T], q: &QuerySpec) -> Vec<T> {
    let (accepted, rejected) = split_mass(probs, q);
    probs
        .iter()
        .enumerate()
        .map(|(v, &p)| if q.is_correct(v) { p * rejected } else { -p * accepted })
        .collect()
}

/// Analytic gradient of the expected-reward objective.
pub fn ideal_gradient<T: Real>(policy: &SoftmaxPolicy<T>, space: &QuerySpace) -> Result<Gradient<T>> {
    let mut grad = RowMatrix::zeros_for(space);
    for (q, &w) in space.queries().iter().zip(space.weights()) {
        let row = policy.row_for(q)?;
        let g = success_gradient_row(&policy.probabilities(row), q);
        for (dst, src) in grad.row_mut(row).iter_mut().zip(g) {
            *dst = T::lit(w) * src;
        }
    }
    Ok(grad)
}

/// Central-difference estimate of the objective gradient, one logit at a time.
pub fn fd_gradient<T: Real>(policy: &SoftmaxPolicy<T>, space: &QuerySpace, h: T) -> Result<Gradient<T>> {
    if !(h > T::zero()) {
        return domain("finite-difference step must be positive");
    }
    let mut grad = RowMatrix::zeros_for(space);
    let base = policy.logits().clone();
    for r in 0..base.rows().len() {
        for c in 0..base.row(r).len() {
            let mut plus = base.clone();
            plus.row_mut(r)[c] = base.row(r)[c] + h;
            let mut minus = base.clone();
            minus.row_mut(r)[c] = base.row(r)[c] - h;
            let jp = rlvr_objective(&policy.with_raw_logits(plus), space)?;
            let jm = rlvr_objective(&policy.with_raw_logits(minus), space)?;
            grad.row_mut(r)[c] = (jp - jm) / (h + h);
        }
    }
    Ok(grad)
}

/// One sampled answer with its verifier reward and exact behavior log-probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Response<T> {
    pub answer: usize,
    pub reward: u8,
    pub log_prob: T,
}

pub fn sample_response<T: Real, R: Rng + ?Sized>(
    policy: &SoftmaxPolicy<T>,
    q: &QuerySpec,
    rng: &mut R,
) -> Result<Response<T>> {
    let row = policy.row_for(q)?;
    Ok(draw_from_row(policy.logits().row(row), q, rng))
}

fn draw_from_row<T: Real, R: Rng + ?Sized>(logits: &[T], q: &QuerySpec, rng: &mut R) -> Response<T> {
    let probs = softmax(logits);
    let u = T::lit(rng.gen::<f64>());
    let answer = categorical_index(probs.iter().copied(), u, probs.len());
    Response {
        answer,
        reward: q.reward(answer),
        log_prob: log_softmax_at(logits, answer),
    }
}

/// Score function of one answer, restricted to its row: `e_answer - pi`.
pub fn score_row<T: Real>(probs: &[T], answer: usize) -> Vec<T> {
    probs
        .iter()
        .enumerate()
        .map(|(v, &p)| if v == answer { T::one() - p } else { -p })
        .collect()
}

/// Full-shape `grad log pi(answer | q)`: zero outside the query's row.
pub fn grad_log_prob<T: Real>(policy: &SoftmaxPolicy<T>, q: &QuerySpec, answer: usize) -> Result<Gradient<T>> {
    let row = policy.row_for(q)?;
    if answer >= q.vocab_size {
        return domain(format!("answer {answer} out of range for query {}", q.id));
    }
    let mut grad = RowMatrix::zeros_like(policy.logits());
    grad.row_mut(row)
        .copy_from_slice(&score_row(&policy.probabilities(row), answer));
    Ok(grad)
}

/// Uniform bound `M` on `||grad log pi||` for any softmax row:
/// `||e_v - pi||^2 = (1 - pi_v)^2 + sum_{u != v} pi_u^2 <= 2`.
pub fn score_norm_bound<T: Real>(_policy: &SoftmaxPolicy<T>) -> T {
    T::lit(2.0).sqrt()
}

/// Two-outcome task with `p = logistic(theta)`. Answer 0 succeeds, answer 1
/// fails, so it coincides with a two-answer softmax with logits `(theta, 0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BernoulliTask<T> {
    pub theta: T,
}

impl<T: Real> BernoulliTask<T> {
    pub fn new(theta: T) -> Result<Self> {
        if !theta.is_finite() {
            return domain("theta must be finite");
        }
        Ok(Self { theta })
    }

    /// Task whose success probability is `p`, for `p` in (0, 1).
    pub fn with_success_probability(p: T) -> Result<Self> {
        if !(p > T::zero() && p < T::one()) {
            return domain(format!("success probability {p} outside (0, 1)"));
        }
        Self::new((p / (T::one() - p)).ln())
    }

    pub fn p(&self) -> T {
        logistic(self.theta)
    }

    /// `1 - p`, computed without cancellation.
    pub fn q(&self) -> T {
        logistic(-self.theta)
    }

    /// `dp / dtheta = p (1 - p)`.
    pub fn dp(&self) -> T {
        self.p() * self.q()
    }
}

pub fn logistic<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// A single-query rollout source with an analytic score function. The Monte
/// Carlo estimators are written against this.
pub trait RolloutModel<T: Real>: Sync {
    fn dim(&self) -> usize;
    fn success_probability(&self) -> T;
    /// `grad p` in the model's own coordinates.
    fn success_gradient(&self) -> Vec<T>;
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Response<T>;
    /// `grad log pi(answer)`.
    fn score(&self, answer: usize) -> Vec<T>;
}

impl<T: Real> RolloutModel<T> for BernoulliTask<T> {
    fn dim(&self) -> usize {
        1
    }

    fn success_probability(&self) -> T {
        self.p()
    }

    fn success_gradient(&self) -> Vec<T> {
        vec![self.dp()]
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Response<T> {
        let u = T::lit(rng.gen::<f64>());
        if u < self.p() {
            Response {
                answer: 0,
                reward: 1,
                log_prob: self.p().ln(),
            }
        } else {
            Response {
                answer: 1,
                reward: 0,
                log_prob: self.q().ln(),
            }
        }
    }

    fn score(&self, answer: usize) -> Vec<T> {
        if answer == 0 {
            vec![self.q()]
        } else {
            vec![-self.p()]
        }
    }
}

/// One query of a softmax policy, viewed as a rollout source over its logit row.
#[derive(Debug, Clone)]
pub struct QueryModel<T> {
    query: QuerySpec,
    logits: Vec<T>,
    probs: Vec<T>,
}

impl<T: Real> QueryModel<T> {
    pub fn new(policy: &SoftmaxPolicy<T>, query: &QuerySpec) -> Result<Self> {
        let row = policy.row_for(query)?;
        Ok(Self {
            query: query.clone(),
            logits: policy.logits().row(row).to_vec(),
            probs: policy.probabilities(row),
        })
    }
}

impl<T: Real> RolloutModel<T> for QueryModel<T> {
    fn dim(&self) -> usize {
        self.probs.len()
    }

    fn success_probability(&self) -> T {
        split_mass(&self.probs, &self.query).0
    }

    fn success_gradient(&self) -> Vec<T> {
        success_gradient_row(&self.probs, &self.query)
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Response<T> {
        draw_from_row(&self.logits, &self.query, rng)
    }

    fn score(&self, answer: usize) -> Vec<T> {
        score_row(&self.probs, answer)
    }
}

#[derive(Serialize, Deserialize)]
struct PolicyFile {
    queries: Vec<QuerySpec>,
    weights: Vec<f64>,
    logits: Vec<Vec<f64>>,
}

/// Serializes a policy together with its query space.
pub fn policy_to_json<T: Real>(policy: &SoftmaxPolicy<T>, space: &QuerySpace) -> String {
    let file = PolicyFile {
        queries: space.queries().to_vec(),
        weights: space.weights().to_vec(),
        logits: policy
            .logits()
            .rows()
            .iter()
            .map(|r| r.iter().map(|v| v.to_f64_lossy()).collect())
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("policy serializes")
}

pub fn policy_from_json<T: Real>(text: &str) -> Result<(QuerySpace, SoftmaxPolicy<T>)> {
    let file: PolicyFile = serde_json::from_str(text).map_err(|e| LabError::Parse(e.to_string()))?;
    let space = QuerySpace::new(file.queries, file.weights)?;
    let logits = file
        .logits
        .into_iter()
        .map(|r| r.into_iter().map(T::lit).collect())
        .collect();
    let policy = SoftmaxPolicy::from_logits(&space, logits)?;
    Ok((space, policy))
}
