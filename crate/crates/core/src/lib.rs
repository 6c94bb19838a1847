//! Kernel evaluation on a pull-based worker pool. The evaluation results
//! feed RL training signals and a multi-turn refinement harness.

pub mod api;
pub mod clock;
pub mod cluster_sim;
pub mod config;
pub mod coordinator;
pub mod eval;
pub mod harness;
pub mod signals;
pub mod worker;
