//! RL training signals. Rewards become returns and group advantages; two
//! sample filters decide what reaches the trainer.

pub mod advantage;
pub mod batch;
pub mod bias;
pub mod mrs;
pub mod prs;
pub mod reward;

pub use advantage::{advantages, grpo_advantages, trloo_advantages, AdvantageGroup, Advantages, Estimator};
pub use batch::{
    compute_signals, read_trajectories, write_rows, SignalRow, SignalsConfig, Trajectory, TurnRecord, RL_SCHEMA,
};
pub use bias::{grpo_bias_experiment, BiasReport, ToyBanditPolicy};
pub use mrs::{mismatch_ratio, mrs_filter, MrsConfig, MrsDecision, MrsVerdict};
pub use prs::{prs_keep_probability, prs_sample, PrsConfig, PrsDecision, PrsMode};
pub use reward::{clip_speedup, reward_to_go, turn_reward, RewardConfig, TurnReward};
