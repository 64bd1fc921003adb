//! Gradient-free evolutionary optimization for modular tool-use policies.
//!
//! A policy is a genome of four module specifications (planner, selector,
//! caller, synthesizer) executed as a fixed pipeline against a tool
//! environment. The engine improves the genome population generation by
//! generation: roll out a sampled parent on a training mini-batch, blame
//! the single module behind the worst episode, rewrite only that module's
//! specification, accept the child on strict mini-batch improvement, and
//! keep only candidates that win at least one held-out selection instance.
//!
//! The scripted environment and runtime make the whole loop a pure
//! function of the specification texts, so every mechanism can be verified
//! without a model call; the gateway adds model-backed blamer, mutator and
//! module runtimes behind record/replay cassettes.

pub mod blame;
pub mod engine;
pub mod env;
pub mod gateway;
pub mod mutation;
pub mod persist;
pub mod policy;
pub mod prompts;
pub mod rollout;
pub mod runner;
pub mod testkit;

pub use blame::{assign_blame, extract_diagnostics, select_blame_episode, BlameReport};
pub use engine::{
    accept_child, run_generations, sample_parent, select_population, GenerationRecord,
    PopulationEntry, RunConfig, RunOutcome,
};
pub use env::{load_task_suite, score, scripted_tags, Observation, TaskInstance, ToolDef};
pub use policy::{ModuleKind, ModuleSpec, PolicyGenome};
pub use rollout::{evaluate_batch, execute_episode, EpisodeRecord, Step, Trajectory};
