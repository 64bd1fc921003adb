//! Episode execution: walks the plan -> select -> call -> synthesize
//! pipeline over each subgoal of a task, recording a full step trace, and
//! evaluates genomes on mini-batches.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Environment, Observation, OutcomeFlag, TaskInstance};
use crate::policy::{ModuleKind, PolicyGenome};

/// What a policy module did at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Action {
    Reason {
        text: String,
    },
    ToolCall {
        tool: String,
        arguments: BTreeMap<String, serde_json::Value>,
    },
    Finish {
        answer: String,
    },
}

/// One trajectory step.
///
/// `Finish` appears at most once and only as the final step; tool calls
/// carry an observation, reasoning and finish steps do not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub index: u32,
    pub state_summary: String,
    pub acting_module: ModuleKind,
    pub action: Action,
    pub observation: Option<Observation>,
}

/// An ordered, non-empty list of steps with contiguous indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Trajectory {
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn length(&self) -> usize {
        self.steps.len()
    }
}

/// One rollout: the task, the trace, the final answer, and its reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub task_id: String,
    pub genome_id: String,
    pub trajectory: Trajectory,
    pub final_answer: String,
    pub reward: f64,
}

/// Context handed to a module runtime for one stage.
pub struct StageContext<'a> {
    pub task: &'a TaskInstance,
    pub subgoal: u32,
    pub module: ModuleKind,
    pub history: &'a [Step],
    pub tools: &'a [crate::env::ToolDef],
}

/// What one stage produced: the recorded action, the capability tags the
/// module demonstrated, and (for the synthesizer) a draft answer.
#[derive(Debug, Clone)]
pub struct StagePlay {
    pub action: Action,
    pub capabilities: BTreeSet<String>,
    pub draft_answer: Option<String>,
}

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("RuntimeFailure: {0}")]
    Failure(String),
    #[error("RuntimeFailure: {0}")]
    Gateway(#[from] crate::gateway::GatewayError),
}

/// A module runtime turns (spec text, stage context) into a stage play.
///
/// The scripted runtime is a pure function of the spec text; model-backed
/// runtimes render the spec as the stage's system message.
pub trait StageRuntime {
    fn run_stage(
        &self,
        spec_text: &str,
        ctx: &StageContext<'_>,
    ) -> Result<StagePlay, RuntimeError>;

    /// Step budget for one episode. Scripted episodes are bounded by
    /// construction; model-backed runtimes get a configurable cap.
    fn max_steps(&self, task: &TaskInstance) -> usize {
        4 * task.num_subgoals as usize + 1
    }
}

/// Deterministic runtime: capabilities are the RULE tags of the spec text.
#[derive(Debug, Clone, Default)]
pub struct ScriptedRuntime;

pub(crate) fn stage_tool_name(module: ModuleKind) -> &'static str {
    match module {
        ModuleKind::Planner => "plan",
        ModuleKind::Selector => "select_tool",
        ModuleKind::Caller => "call_tool",
        ModuleKind::Synthesizer => "synthesize",
    }
}

impl StageRuntime for ScriptedRuntime {
    fn run_stage(
        &self,
        spec_text: &str,
        ctx: &StageContext<'_>,
    ) -> Result<StagePlay, RuntimeError> {
        let action = Action::ToolCall {
            tool: stage_tool_name(ctx.module).to_string(),
            arguments: BTreeMap::from([(
                "subgoal".to_string(),
                serde_json::Value::from(ctx.subgoal),
            )]),
        };
        let draft_answer = (ctx.module == ModuleKind::Synthesizer).then(|| {
            format!(
                "Synthesized answer for {}: {}",
                ctx.task.id, ctx.task.gold_answer
            )
        });
        Ok(StagePlay {
            action,
            capabilities: crate::env::scripted_tags(spec_text),
            draft_answer,
        })
    }
}

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("EmptyBatch: evaluate_batch requires at least one task")]
    EmptyBatch,
}

/// Executes one episode of `genome` on `task`.
///
/// Stages run in pipeline order within each subgoal. The episode truncates
/// at the first failing stage check; a runtime failure is recorded as an
/// `EXEC_ERROR` observation and forces reward 0.
pub fn execute_episode(
    genome: &PolicyGenome,
    task: &TaskInstance,
    env: &dyn Environment,
    runtime: &dyn StageRuntime,
) -> EpisodeRecord {
    let mut steps: Vec<Step> = Vec::new();
    let mut stages_passed: u32 = 0;
    let mut draft_answer: Option<String> = None;
    let mut truncated = false;
    let mut runtime_failed = false;
    let budget = runtime.max_steps(task);

    'subgoals: for subgoal in 0..task.num_subgoals {
        for module in ModuleKind::PIPELINE {
            if steps.len() >= budget {
                // Budget exhausted before the pipeline completed.
                steps.push(Step {
                    index: steps.len() as u32,
                    state_summary: format!("step budget {budget} exhausted"),
                    acting_module: module,
                    action: Action::Finish {
                        answer: String::new(),
                    },
                    observation: None,
                });
                truncated = true;
                break 'subgoals;
            }
            let index = steps.len() as u32;
            let ctx = StageContext {
                task,
                subgoal,
                module,
                history: &steps,
                tools: env.tools(),
            };
            match runtime.run_stage(genome.spec_text(module), &ctx) {
                Ok(play) => {
                    let verdict = env.check_stage(task, subgoal, module, &play.capabilities);
                    let observation = Observation::new(
                        index,
                        verdict.detail.clone(),
                        BTreeSet::from([verdict.flag]),
                    );
                    steps.push(Step {
                        index,
                        state_summary: format!("subgoal {subgoal}, stage {module}"),
                        acting_module: module,
                        action: play.action,
                        observation: Some(observation),
                    });
                    if !verdict.passed {
                        truncated = true;
                        break 'subgoals;
                    }
                    stages_passed += 1;
                    if module == ModuleKind::Synthesizer {
                        draft_answer = play.draft_answer;
                    }
                }
                Err(err) => {
                    steps.push(Step {
                        index,
                        state_summary: format!("subgoal {subgoal}, stage {module}"),
                        acting_module: module,
                        action: Action::ToolCall {
                            tool: stage_tool_name(module).to_string(),
                            arguments: BTreeMap::from([(
                                "subgoal".to_string(),
                                serde_json::Value::from(subgoal),
                            )]),
                        },
                        observation: Some(Observation::failure(
                            index,
                            err.to_string(),
                            OutcomeFlag::ExecError,
                        )),
                    });
                    truncated = true;
                    runtime_failed = true;
                    break 'subgoals;
                }
            }
        }
    }

    let final_answer = if truncated {
        String::new()
    } else {
        let answer = draft_answer.unwrap_or_default();
        steps.push(Step {
            index: steps.len() as u32,
            state_summary: "final answer".to_string(),
            acting_module: ModuleKind::Synthesizer,
            action: Action::Finish {
                answer: answer.clone(),
            },
            observation: None,
        });
        answer
    };

    let reward = if runtime_failed {
        0.0
    } else {
        env.score(task, &final_answer, stages_passed)
            .expect("stages_passed is bounded by the walk")
    };

    EpisodeRecord {
        task_id: task.id.clone(),
        genome_id: genome.id.clone(),
        trajectory: Trajectory { steps },
        final_answer,
        reward,
    }
}

/// Rolls out `genome` over `tasks` in order and returns the mean reward
/// together with the per-task episodes.
pub fn evaluate_batch(
    genome: &PolicyGenome,
    tasks: &[&TaskInstance],
    env: &dyn Environment,
    runtime: &dyn StageRuntime,
) -> Result<(f64, Vec<EpisodeRecord>), RolloutError> {
    if tasks.is_empty() {
        return Err(RolloutError::EmptyBatch);
    }
    let episodes: Vec<EpisodeRecord> = tasks
        .iter()
        .map(|task| execute_episode(genome, task, env, runtime))
        .collect();
    let mean = episodes.iter().map(|e| e.reward).sum::<f64>() / episodes.len() as f64;
    Ok((mean, episodes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{ScriptedEnvironment, SkillRequirement};
    use std::collections::BTreeMap as Map;

    fn genome_with_tags(tags: &[(ModuleKind, &str)]) -> PolicyGenome {
        let mut texts = Map::from([
            (ModuleKind::Planner, "plan base".to_string()),
            (ModuleKind::Selector, "select base".to_string()),
            (ModuleKind::Caller, "call base".to_string()),
            (ModuleKind::Synthesizer, "synth base".to_string()),
        ]);
        for (kind, tag) in tags {
            let text = texts.get_mut(kind).unwrap();
            text.push_str(&format!("\nRULE: {tag}"));
        }
        PolicyGenome::new_seed(&texts).unwrap()
    }

    fn one_subgoal_task(reqs: &[(ModuleKind, &str)]) -> TaskInstance {
        TaskInstance {
            id: "task-1".to_string(),
            instruction: "solve it".to_string(),
            num_subgoals: 1,
            gold_answer: "gold-77".to_string(),
            required_skills: reqs
                .iter()
                .map(|(m, tag)| SkillRequirement {
                    subgoal: 0,
                    module: *m,
                    tags: std::collections::BTreeSet::from([tag.to_string()]),
                })
                .collect(),
        }
    }

    #[test]
    fn satisfied_genome_full_trajectory() {
        let env = ScriptedEnvironment::with_stage_tools();
        let task = one_subgoal_task(&[
            (ModuleKind::Planner, "p-tag"),
            (ModuleKind::Selector, "s-tag"),
            (ModuleKind::Caller, "c-tag"),
            (ModuleKind::Synthesizer, "y-tag"),
        ]);
        let genome = genome_with_tags(&[
            (ModuleKind::Planner, "p-tag"),
            (ModuleKind::Selector, "s-tag"),
            (ModuleKind::Caller, "c-tag"),
            (ModuleKind::Synthesizer, "y-tag"),
        ]);
        let episode = execute_episode(&genome, &task, &env, &ScriptedRuntime);
        assert_eq!(episode.reward, 1.0);
        assert_eq!(episode.trajectory.length(), 5);
        assert!(matches!(
            episode.trajectory.steps[4].action,
            Action::Finish { .. }
        ));
        assert!(episode.final_answer.contains("gold-77"));
        // Stage order within the subgoal follows the pipeline.
        let modules: Vec<ModuleKind> = episode.trajectory.steps[..4]
            .iter()
            .map(|s| s.acting_module)
            .collect();
        assert_eq!(modules, ModuleKind::PIPELINE.to_vec());
    }

    #[test]
    fn selector_gap_truncates_with_wrong_tool() {
        let env = ScriptedEnvironment::with_stage_tools();
        let task = one_subgoal_task(&[(ModuleKind::Selector, "s-tag")]);
        let genome = genome_with_tags(&[]);
        let episode = execute_episode(&genome, &task, &env, &ScriptedRuntime);
        assert_eq!(episode.reward, 0.25);
        assert_eq!(episode.trajectory.length(), 2);
        let last = episode.trajectory.steps.last().unwrap();
        assert_eq!(last.acting_module, ModuleKind::Selector);
        let obs = last.observation.as_ref().unwrap();
        assert!(obs.outcome_flags.contains(&OutcomeFlag::WrongTool));
        assert!(episode.final_answer.is_empty());
    }

    #[test]
    fn repeated_execution_is_byte_identical() {
        let env = ScriptedEnvironment::with_stage_tools();
        let task = one_subgoal_task(&[(ModuleKind::Caller, "c-tag")]);
        let genome = genome_with_tags(&[(ModuleKind::Planner, "other")]);
        let a = execute_episode(&genome, &task, &env, &ScriptedRuntime);
        let b = execute_episode(&genome, &task, &env, &ScriptedRuntime);
        assert_eq!(a, b);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn batch_mean_and_order() {
        let env = ScriptedEnvironment::with_stage_tools();
        // Rewards 1.0, 0.5 and 0.0 by construction.
        let full = one_subgoal_task(&[]);
        let mut half = one_subgoal_task(&[(ModuleKind::Caller, "c-tag")]);
        half.id = "task-2".to_string();
        let mut zero = one_subgoal_task(&[(ModuleKind::Planner, "p-tag")]);
        zero.id = "task-3".to_string();
        let genome = genome_with_tags(&[]);
        let tasks = [&full, &half, &zero];
        let (mean, episodes) =
            evaluate_batch(&genome, &tasks, &env, &ScriptedRuntime).unwrap();
        assert!((mean - 0.5).abs() < 1e-12);
        let recomputed =
            episodes.iter().map(|e| e.reward).sum::<f64>() / episodes.len() as f64;
        assert!((mean - recomputed).abs() <= 1e-12);
        for (episode, task) in episodes.iter().zip(tasks.iter()) {
            assert_eq!(episode.task_id, task.id);
        }
    }

    #[test]
    fn singleton_batch() {
        let env = ScriptedEnvironment::with_stage_tools();
        let mut task = one_subgoal_task(&[(ModuleKind::Synthesizer, "y-tag")]);
        task.id = "solo".to_string();
        let genome = genome_with_tags(&[]);
        let (mean, episodes) =
            evaluate_batch(&genome, &[&task], &env, &ScriptedRuntime).unwrap();
        assert_eq!(mean, 0.75);
        assert_eq!(episodes.len(), 1);
    }

    #[test]
    fn empty_batch_rejected() {
        let env = ScriptedEnvironment::with_stage_tools();
        let genome = genome_with_tags(&[]);
        assert!(matches!(
            evaluate_batch(&genome, &[], &env, &ScriptedRuntime),
            Err(RolloutError::EmptyBatch)
        ));
    }

    #[test]
    fn runtime_failure_records_exec_error_and_zero_reward() {
        struct FailingRuntime;
        impl StageRuntime for FailingRuntime {
            fn run_stage(
                &self,
                _spec: &str,
                ctx: &StageContext<'_>,
            ) -> Result<StagePlay, RuntimeError> {
                if ctx.module == ModuleKind::Caller {
                    Err(RuntimeError::Failure("backend unavailable".to_string()))
                } else {
                    ScriptedRuntime.run_stage(_spec, ctx)
                }
            }
        }
        let env = ScriptedEnvironment::with_stage_tools();
        let task = one_subgoal_task(&[]);
        let genome = genome_with_tags(&[]);
        let episode = execute_episode(&genome, &task, &env, &FailingRuntime);
        assert_eq!(episode.reward, 0.0);
        let last = episode.trajectory.steps.last().unwrap();
        let obs = last.observation.as_ref().unwrap();
        assert!(obs.outcome_flags.contains(&OutcomeFlag::ExecError));
    }

    #[test]
    fn exhausted_step_budget_finishes_with_empty_answer() {
        struct TinyBudget;
        impl StageRuntime for TinyBudget {
            fn run_stage(
                &self,
                spec: &str,
                ctx: &StageContext<'_>,
            ) -> Result<StagePlay, RuntimeError> {
                ScriptedRuntime.run_stage(spec, ctx)
            }
            fn max_steps(&self, _task: &TaskInstance) -> usize {
                2
            }
        }
        let env = ScriptedEnvironment::with_stage_tools();
        let task = one_subgoal_task(&[]);
        let genome = genome_with_tags(&[]);
        let episode = execute_episode(&genome, &task, &env, &TinyBudget);
        assert_eq!(episode.trajectory.length(), 3);
        let last = episode.trajectory.steps.last().unwrap();
        assert_eq!(
            last.action,
            Action::Finish {
                answer: String::new()
            }
        );
        assert!(last.observation.is_none());
        assert!(episode.final_answer.is_empty());
        // Two stages passed before the budget hit.
        assert_eq!(episode.reward, 0.5);
    }

    #[test]
    fn two_subgoal_partial_pass() {
        let env = ScriptedEnvironment::with_stage_tools();
        let mut task = one_subgoal_task(&[]);
        task.num_subgoals = 2;
        task.required_skills = vec![SkillRequirement {
            subgoal: 1,
            module: ModuleKind::Planner,
            tags: std::collections::BTreeSet::from(["deep-plan".to_string()]),
        }];
        let genome = genome_with_tags(&[]);
        let episode = execute_episode(&genome, &task, &env, &ScriptedRuntime);
        // First subgoal passes all four stages, second fails at the planner.
        assert_eq!(episode.reward, 0.5);
        assert_eq!(episode.trajectory.length(), 5);
    }
}
