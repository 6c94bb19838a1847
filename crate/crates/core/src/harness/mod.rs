//! Multi-turn refinement against the coordinator, plus the Fast@p metrics
//! used to score sequential test-time scaling.

pub mod bench;
pub mod context;
pub mod embedded;
pub mod fast;
pub mod generator;
pub mod trajectory;

pub use bench::{read_prompts, run_benchmark, BenchConfig, BenchError, BenchOutcome, Report, REPORT_SCHEMA};
pub use context::{
    assemble_context, select_turns, AssembledContext, ContextMode, ContextPolicy, HistoryTurn, TokenCounter,
    WhitespaceTokenCounter, TRUNCATION_MARKER,
};
pub use embedded::{EmbeddedCluster, EmbeddedConfig};
pub use fast::{fast_at_p, fast_at_p_upto, FastAtP, FastMode, TurnOutcome, DEFAULT_THRESHOLDS};
pub use generator::{
    parse_generation, ExecGenerator, Generation, GenerationRequest, Generator, GeneratorError, ScriptStep,
    ScriptedGenerator, ScriptedTask,
};
pub use trajectory::{run_trajectory, Prompt, TrajectoryConfig, TrajectoryRun, TurnLog};
