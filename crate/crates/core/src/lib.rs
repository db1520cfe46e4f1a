//! Policy-improvement reinforcement learning on a tabular softmax testbed.
//!
//! Everything is generic over the scalar type (`f32` or `f64`) through
//! [`Real`]; the aliases at the bottom of this file fix it to `f64`.

// `!(x > 0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod env;
pub mod error;
pub mod group;
pub mod pirl;
pub mod rng;
pub mod scalar;
pub mod theory;
pub mod trainer;

pub use env::{
    fd_gradient, grad_log_prob, ideal_gradient, policy_from_json, policy_to_json, rlvr_objective, sample_response,
    score_norm_bound, softmax, success_rate, BernoulliTask, QueryModel, QuerySpace, QuerySpec, Response,
    RolloutModel, RowMatrix, SoftmaxPolicy,
};
pub use error::{LabError, Result};
pub use group::{
    filter_degenerate, group_stats, grpo_advantages, sample_batch, Advantages, BatchRollout, FilteredBatch,
    GroupRollout, GroupStats,
};
pub use pirl::{
    phi_lambda, pi_rewards, HistoryMemory, HistoryStats, ImprovementSignal, PiRewardSet, SkipReason, StoredBatch,
};
pub use rng::{StreamKey, Streams};
pub use scalar::{Moments, Real};
pub use theory::{eta_asymptotic, eta_exact, mc_grpo_gradient, mc_verify_gradient, nondegenerate_prob, McGradientReport};
pub use trainer::{
    effective_scaling_factor, explore_gradient, explore_step, verify_gradient, verify_step, ClipRange,
    IterationRecord, RunOutput, TrainState, Trainer, TrainerConfig, Variant,
};

pub type Policy = SoftmaxPolicy<f64>;
pub type Gradient = env::Gradient<f64>;
pub type Batch = BatchRollout<f64>;
pub type Group = GroupRollout<f64>;
pub type Memory = HistoryMemory<f64>;
pub type Config = TrainerConfig<f64>;
pub type Record = IterationRecord<f64>;
pub type Signal = ImprovementSignal<f64>;
