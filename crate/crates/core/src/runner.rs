//! Backend wiring and run-directory assembly.
//!
//! A run writes one fresh directory under the configured output root:
//! `config.json`, `history.jsonl`, `episodes.jsonl`, `snapshot.json`,
//! `curves.csv`, and (model backend) `cassette.jsonl`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::blame::{ModelBlamer, OracleBlamer};
use crate::engine::{
    run_generations, Backend, EngineError, RunConfig, RunOutcome, RunSink,
};
use crate::env::{
    load_task_suite, load_tool_suite, ScriptedEnvironment, SuiteError, TaskSuite,
};
use crate::gateway::{
    complete, Cassette, CassetteMode, ChatRequest, GatewayError, HttpTransport, Message,
    NullTransport, Transport, ENV_MODEL,
};
use crate::mutation::{ModelMutator, OracleMutator};
use crate::persist::{
    learning_curve, save_snapshot, write_curve_csv, PersistError, RunDirSink,
};
use crate::policy::ModuleKind;
use crate::rollout::{
    Action, ScriptedRuntime, StageContext, StagePlay, StageRuntime, RuntimeError,
};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Suite(#[from] SuiteError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Persist(#[from] PersistError),
    #[error("IoError: {0}")]
    Io(#[from] std::io::Error),
    #[error("ConfigError: {0}")]
    Config(String),
}

/// Where a finished run landed and what it produced.
#[derive(Debug)]
pub struct RunArtifacts {
    pub run_dir: PathBuf,
    pub outcome: RunOutcome,
}

/// Module runtime that renders the spec text as the stage's system message
/// and derives the stage play from the model's reply.
pub struct ModelRuntime<'a> {
    pub model_id: String,
    pub temperature: f64,
    pub max_output_chars: usize,
    pub step_budget: usize,
    pub cassette: &'a Cassette,
    pub transport: &'a dyn Transport,
}

impl ModelRuntime<'_> {
    fn stage_prompt(&self, ctx: &StageContext<'_>) -> String {
        let mut prompt = format!(
            "# STAGE\nmodule: {}\nsubgoal: {}\ntask: {}: {}\n\n# TOOLS\n",
            ctx.module, ctx.subgoal, ctx.task.id, ctx.task.instruction
        );
        for tool in ctx.tools {
            prompt.push_str(&format!("- {}: {}\n", tool.name, tool.documentation));
        }
        prompt.push_str("\n# HISTORY\n");
        for step in ctx.history {
            let observation = step
                .observation
                .as_ref()
                .map(|o| format!(" -> {}", o.payload))
                .unwrap_or_default();
            prompt.push_str(&format!(
                "t{} [{}]{}\n",
                step.index, step.acting_module, observation
            ));
        }
        prompt.push_str(
            "\n# INSTRUCTIONS\nState the capability tags your specification provides for this stage, one per line, formatted exactly as:\nRULE: <tag>\nList every RULE tag your specification declares.\n",
        );
        if ctx.module == ModuleKind::Synthesizer {
            prompt.push_str(
                "Then give the final user answer on one line formatted as:\nANSWER: <answer grounded in the tool results above>\n",
            );
        }
        prompt
    }
}

impl StageRuntime for ModelRuntime<'_> {
    fn run_stage(
        &self,
        spec_text: &str,
        ctx: &StageContext<'_>,
    ) -> Result<StagePlay, RuntimeError> {
        let mut request = ChatRequest::new(
            self.model_id.clone(),
            vec![
                Message::system(spec_text),
                Message::user(self.stage_prompt(ctx)),
            ],
        );
        request.temperature = self.temperature;
        request.max_output_chars = self.max_output_chars;
        let response = complete(&request, self.cassette, self.transport)?;
        let capabilities = crate::env::scripted_tags(&response);
        let draft_answer = (ctx.module == ModuleKind::Synthesizer).then(|| {
            response
                .lines()
                .rev()
                .find_map(|line| line.trim().strip_prefix("ANSWER:"))
                .map(|answer| answer.trim().to_string())
                .unwrap_or_default()
        });
        Ok(StagePlay {
            action: Action::ToolCall {
                tool: crate::rollout::stage_tool_name(ctx.module).to_string(),
                arguments: BTreeMap::from([(
                    "subgoal".to_string(),
                    serde_json::Value::from(ctx.subgoal),
                )]),
            },
            capabilities,
            draft_answer,
        })
    }

    fn max_steps(&self, _task: &crate::env::TaskInstance) -> usize {
        self.step_budget
    }
}

fn digest8(payload: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(payload.as_bytes());
    let digest = hasher.finalize();
    digest[..4].iter().map(|b| format!("{b:02x}")).collect()
}

/// Creates a fresh run directory named after the config digest, suffixed
/// when the same configuration has run before.
pub fn create_run_dir(out_dir: &Path, config: &RunConfig) -> Result<PathBuf, RunnerError> {
    std::fs::create_dir_all(out_dir)?;
    let base = format!(
        "run-{}",
        digest8(&serde_json::to_string(config).map_err(|e| RunnerError::Config(e.to_string()))?)
    );
    for attempt in 0u32.. {
        let name = if attempt == 0 {
            base.clone()
        } else {
            format!("{base}-{}", attempt + 1)
        };
        let candidate = out_dir.join(&name);
        match std::fs::create_dir(&candidate) {
            Ok(()) => return Ok(candidate),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(RunnerError::Io(e)),
        }
    }
    unreachable!("directory creation either succeeds or errors")
}

fn resolve_model_id(config: &RunConfig) -> Result<String, RunnerError> {
    if !config.model_id.is_empty() {
        return Ok(config.model_id.clone());
    }
    std::env::var(ENV_MODEL).map_err(|_| {
        RunnerError::Config(format!(
            "model backend requires model_id in the config or {ENV_MODEL} in the environment"
        ))
    })
}

fn build_environment(config: &RunConfig) -> Result<ScriptedEnvironment, RunnerError> {
    Ok(match &config.tool_suite {
        Some(path) => ScriptedEnvironment::new(load_tool_suite(path)?),
        None => ScriptedEnvironment::with_stage_tools(),
    })
}

/// Runs a configuration end to end with the default transport resolution:
/// replay mode stays offline, record/passthrough use the HTTP transport
/// configured from the environment.
pub fn execute_run(config: &RunConfig) -> Result<RunArtifacts, RunnerError> {
    match (config.backend, config.cassette_mode) {
        (Backend::Scripted, _) => execute_run_with_transport(config, &NullTransport),
        (Backend::Model, CassetteMode::Replay) => {
            execute_run_with_transport(config, &NullTransport)
        }
        (Backend::Model, _) => {
            let transport = HttpTransport::from_env()?;
            execute_run_with_transport(config, &transport)
        }
    }
}

/// As [`execute_run`], with an explicit transport (hermetic tests inject a
/// stub here).
pub fn execute_run_with_transport(
    config: &RunConfig,
    transport: &dyn Transport,
) -> Result<RunArtifacts, RunnerError> {
    let suite = load_task_suite(&config.task_suite)?;
    let env = build_environment(config)?;
    let run_dir = create_run_dir(&config.out_dir, config)?;
    let mut config_json = serde_json::to_string_pretty(config)
        .map_err(|e| RunnerError::Config(e.to_string()))?;
    config_json.push('\n');
    std::fs::write(run_dir.join("config.json"), config_json)?;
    let mut sink = RunDirSink::create(&run_dir)?;

    let outcome = match config.backend {
        Backend::Scripted => run_scripted(config, &suite, &env, &mut sink)?,
        Backend::Model => run_model(config, &suite, &env, transport, &run_dir, &mut sink)?,
    };

    save_snapshot(
        &outcome.population,
        config.max_generations,
        &run_dir.join("snapshot.json"),
    )?;
    let mut curves = Vec::new();
    write_curve_csv(&learning_curve(&outcome.history), &mut curves)?;
    std::fs::write(run_dir.join("curves.csv"), curves)?;
    let mut lineage = String::new();
    for genome in &outcome.genomes {
        lineage.push_str(
            &serde_json::to_string(genome).map_err(|e| RunnerError::Config(e.to_string()))?,
        );
        lineage.push('\n');
    }
    std::fs::write(run_dir.join("lineage.jsonl"), lineage)?;

    Ok(RunArtifacts { run_dir, outcome })
}

fn run_scripted(
    config: &RunConfig,
    suite: &TaskSuite,
    env: &ScriptedEnvironment,
    sink: &mut dyn RunSink,
) -> Result<RunOutcome, RunnerError> {
    let runtime = ScriptedRuntime;
    let mut blamer = OracleBlamer;
    let mut mutator = OracleMutator::new(suite.all_tasks().cloned());
    Ok(run_generations(
        config,
        suite,
        env,
        &runtime,
        &mut blamer,
        &mut mutator,
        sink,
    )?)
}

fn run_model(
    config: &RunConfig,
    suite: &TaskSuite,
    env: &ScriptedEnvironment,
    transport: &dyn Transport,
    run_dir: &Path,
    sink: &mut dyn RunSink,
) -> Result<RunOutcome, RunnerError> {
    let cassette_path = config
        .cassette
        .clone()
        .unwrap_or_else(|| run_dir.join("cassette.jsonl"));
    let cassette = Cassette::open(&cassette_path, config.cassette_mode)?;
    let model_id = resolve_model_id(config)?;
    let tasks: BTreeMap<String, crate::env::TaskInstance> = suite
        .all_tasks()
        .map(|t| (t.id.clone(), t.clone()))
        .collect();

    let runtime = ModelRuntime {
        model_id: model_id.clone(),
        temperature: config.temperature,
        max_output_chars: config.max_output_chars,
        step_budget: config.max_steps,
        cassette: &cassette,
        transport,
    };
    let mut blamer = ModelBlamer {
        model_id: config.blamer_model_id.clone().unwrap_or_else(|| model_id.clone()),
        temperature: config.temperature,
        max_output_chars: config.max_output_chars,
        cassette: &cassette,
        transport,
        tasks: tasks.clone(),
    };
    let mut mutator = ModelMutator {
        model_id: config.mutator_model_id.clone().unwrap_or_else(|| model_id.clone()),
        temperature: config.temperature,
        max_output_chars: config.max_output_chars,
        cassette: &cassette,
        transport,
        tasks,
    };
    Ok(run_generations(
        config,
        suite,
        env,
        &runtime,
        &mut blamer,
        &mut mutator,
        sink,
    )?)
}
