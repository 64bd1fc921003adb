//! Tool-environment contract and the deterministic scripted environment.
//!
//! The scripted environment verdicts each pipeline stage by comparing the
//! skill tags a module demonstrates against the task's requirements for
//! that (subgoal, module) stage. Outcomes are a pure function of the spec
//! texts, which makes the whole optimization loop verifiable without any
//! model calls.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::ModuleKind;

/// Value kind accepted by one tool argument.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    String,
    Number,
    Boolean,
    Enum(Vec<String>),
}

/// One tool: name, argument schema, and documentation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolDef {
    pub name: String,
    pub argument_schema: BTreeMap<String, ValueKind>,
    pub documentation: String,
}

/// A requirement entry as stored in the task suite file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillRequirement {
    pub subgoal: u32,
    pub module: ModuleKind,
    pub tags: BTreeSet<String>,
}

/// One task: instruction, per-stage skill requirements, and the gold answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: String,
    pub instruction: String,
    pub num_subgoals: u32,
    pub gold_answer: String,
    #[serde(default)]
    pub required_skills: Vec<SkillRequirement>,
}

impl TaskInstance {
    /// Required tags for the (subgoal, module) stage; empty when the task
    /// places no requirement there.
    pub fn required_tags(&self, subgoal: u32, module: ModuleKind) -> BTreeSet<String> {
        self.required_skills
            .iter()
            .filter(|r| r.subgoal == subgoal && r.module == module)
            .flat_map(|r| r.tags.iter().cloned())
            .collect()
    }

    /// Total number of stage checks: four per subgoal.
    pub fn stage_count(&self) -> u32 {
        4 * self.num_subgoals
    }

    fn validate(&self) -> Result<(), SuiteError> {
        if self.num_subgoals == 0 {
            return Err(SuiteError::Parse(format!(
                "task {}: num_subgoals must be positive",
                self.id
            )));
        }
        for req in &self.required_skills {
            if req.subgoal >= self.num_subgoals {
                return Err(SuiteError::Parse(format!(
                    "task {}: requirement subgoal {} out of range",
                    self.id, req.subgoal
                )));
            }
        }
        Ok(())
    }
}

/// Stage outcome flags. `Ok` is mutually exclusive with all failure flags.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OutcomeFlag {
    Ok,
    Empty,
    SchemaViolation,
    ExecError,
    WrongTool,
    Ungrounded,
}

/// What a tool invocation (or stage check) returned.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub step_index: u32,
    pub payload: String,
    pub outcome_flags: BTreeSet<OutcomeFlag>,
}

impl Observation {
    pub fn new(
        step_index: u32,
        payload: impl Into<String>,
        flags: BTreeSet<OutcomeFlag>,
    ) -> Observation {
        debug_assert!(
            !(flags.contains(&OutcomeFlag::Ok) && flags.len() > 1),
            "OK excludes every other flag"
        );
        Observation {
            step_index,
            payload: payload.into(),
            outcome_flags: flags,
        }
    }

    pub fn ok(step_index: u32, payload: impl Into<String>) -> Observation {
        Observation::new(step_index, payload, BTreeSet::from([OutcomeFlag::Ok]))
    }

    pub fn failure(
        step_index: u32,
        payload: impl Into<String>,
        flag: OutcomeFlag,
    ) -> Observation {
        Observation::new(step_index, payload, BTreeSet::from([flag]))
    }

    pub fn is_ok(&self) -> bool {
        self.outcome_flags.contains(&OutcomeFlag::Ok)
    }
}

/// A task suite: training pool plus held-out selection split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSuite {
    pub train: Vec<TaskInstance>,
    pub selection: Vec<TaskInstance>,
}

impl TaskSuite {
    pub fn task(&self, id: &str) -> Option<&TaskInstance> {
        self.train
            .iter()
            .chain(self.selection.iter())
            .find(|t| t.id == id)
    }

    pub fn all_tasks(&self) -> impl Iterator<Item = &TaskInstance> {
        self.train.iter().chain(self.selection.iter())
    }
}

#[derive(Debug, Error)]
pub enum SuiteError {
    #[error("IoError: {0}")]
    Io(#[from] std::io::Error),
    #[error("ParseError: {0}")]
    Parse(String),
    #[error("OverlappingSplits: task id {0} appears in both splits")]
    OverlappingSplits(String),
    #[error("EmptySplit: the {0} split contains no tasks")]
    EmptySplit(&'static str),
}

/// Loads a task suite file, keeping file order and enforcing disjoint splits.
pub fn load_task_suite(path: &Path) -> Result<TaskSuite, SuiteError> {
    let raw = std::fs::read_to_string(path)?;
    parse_task_suite(&raw)
}

pub fn parse_task_suite(raw: &str) -> Result<TaskSuite, SuiteError> {
    let suite: TaskSuite =
        serde_json::from_str(raw).map_err(|e| SuiteError::Parse(e.to_string()))?;
    if suite.train.is_empty() {
        return Err(SuiteError::EmptySplit("train"));
    }
    if suite.selection.is_empty() {
        return Err(SuiteError::EmptySplit("selection"));
    }
    let mut seen = BTreeSet::new();
    for task in suite.train.iter() {
        task.validate()?;
        if !seen.insert(task.id.clone()) {
            return Err(SuiteError::OverlappingSplits(task.id.clone()));
        }
    }
    for task in suite.selection.iter() {
        task.validate()?;
        if !seen.insert(task.id.clone()) {
            return Err(SuiteError::OverlappingSplits(task.id.clone()));
        }
    }
    Ok(suite)
}

/// Loads a tool suite file: a JSON list of tool definitions.
pub fn load_tool_suite(path: &Path) -> Result<Vec<ToolDef>, SuiteError> {
    let raw = std::fs::read_to_string(path)?;
    let tools: Vec<ToolDef> =
        serde_json::from_str(&raw).map_err(|e| SuiteError::Parse(e.to_string()))?;
    let mut seen = BTreeSet::new();
    for tool in &tools {
        if !seen.insert(tool.name.clone()) {
            return Err(SuiteError::Parse(format!(
                "duplicate tool name {}",
                tool.name
            )));
        }
    }
    Ok(tools)
}

/// Extracts the skill tags declared by a specification text.
///
/// A tag is the token `t` of any line that, after trimming, reads `RULE: t`
/// with `t` non-empty and free of internal whitespace.
pub fn scripted_tags(spec_text: &str) -> BTreeSet<String> {
    spec_text
        .lines()
        .filter_map(|line| {
            let rest = line.trim().strip_prefix("RULE:")?;
            let tag = rest.trim();
            if tag.is_empty() || tag.contains(char::is_whitespace) {
                None
            } else {
                Some(tag.to_string())
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvironmentError {
    #[error("OutOfRangeStageCount: {stages_passed} not in [0, {max}]")]
    OutOfRangeStageCount { stages_passed: u32, max: u32 },
}

/// Graded prefix reward: the fraction of stage checks passed, with full
/// reward additionally requiring the answer to quote the gold answer.
pub fn score(
    task: &TaskInstance,
    final_answer: &str,
    stages_passed: u32,
) -> Result<f64, EnvironmentError> {
    let max = task.stage_count();
    if stages_passed > max {
        return Err(EnvironmentError::OutOfRangeStageCount { stages_passed, max });
    }
    let grounded = final_answer.contains(task.gold_answer.as_str());
    let capped = if grounded {
        stages_passed
    } else {
        stages_passed.min(max - 1)
    };
    Ok(f64::from(capped) / f64::from(max))
}

/// Verdict for one stage check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageVerdict {
    pub passed: bool,
    pub flag: OutcomeFlag,
    pub detail: String,
}

/// The failure flag characteristic of each module's stage.
pub fn failure_flag(module: ModuleKind) -> OutcomeFlag {
    match module {
        ModuleKind::Planner => OutcomeFlag::Empty,
        ModuleKind::Selector => OutcomeFlag::WrongTool,
        ModuleKind::Caller => OutcomeFlag::SchemaViolation,
        ModuleKind::Synthesizer => OutcomeFlag::Ungrounded,
    }
}

/// A stateless tool environment that can verdict stages and score episodes.
pub trait Environment: Sync {
    /// Checks the (subgoal, module) stage given the capability tags the
    /// module demonstrated.
    fn check_stage(
        &self,
        task: &TaskInstance,
        subgoal: u32,
        module: ModuleKind,
        capabilities: &BTreeSet<String>,
    ) -> StageVerdict;

    /// Scores a finished episode.
    fn score(
        &self,
        task: &TaskInstance,
        final_answer: &str,
        stages_passed: u32,
    ) -> Result<f64, EnvironmentError>;

    /// The tools visible to the policy.
    fn tools(&self) -> &[ToolDef];
}

/// Deterministic environment: a stage passes iff the task's required tags
/// for that stage are a subset of the module's demonstrated tags.
#[derive(Debug, Clone, Default)]
pub struct ScriptedEnvironment {
    tools: Vec<ToolDef>,
}

impl ScriptedEnvironment {
    pub fn new(tools: Vec<ToolDef>) -> ScriptedEnvironment {
        ScriptedEnvironment { tools }
    }

    /// The four built-in stage tools of the scripted environment.
    pub fn with_stage_tools() -> ScriptedEnvironment {
        let tool = |name: &str, doc: &str| ToolDef {
            name: name.to_string(),
            argument_schema: BTreeMap::from([("subgoal".to_string(), ValueKind::Number)]),
            documentation: doc.to_string(),
        };
        ScriptedEnvironment::new(vec![
            tool("plan", "Decompose the current subgoal into executable steps."),
            tool("select_tool", "Pick the tool matching the current subgoal."),
            tool("call_tool", "Invoke the selected tool with schema-valid arguments."),
            tool("synthesize", "Integrate tool outputs into a grounded answer."),
        ])
    }
}

impl Environment for ScriptedEnvironment {
    fn check_stage(
        &self,
        task: &TaskInstance,
        subgoal: u32,
        module: ModuleKind,
        capabilities: &BTreeSet<String>,
    ) -> StageVerdict {
        let required = task.required_tags(subgoal, module);
        let missing: Vec<&String> = required.difference(capabilities).collect();
        if missing.is_empty() {
            // A passing tool call surfaces the data the synthesizer must
            // ground its answer in.
            let detail = if module == ModuleKind::Caller {
                format!(
                    "stage ({subgoal}, {module}) check passed; tool returned {}",
                    task.gold_answer
                )
            } else {
                format!("stage ({subgoal}, {module}) check passed")
            };
            StageVerdict {
                passed: true,
                flag: OutcomeFlag::Ok,
                detail,
            }
        } else {
            StageVerdict {
                passed: false,
                flag: failure_flag(module),
                detail: format!(
                    "stage ({subgoal}, {module}) failed; missing capability {}",
                    missing[0]
                ),
            }
        }
    }

    fn score(
        &self,
        task: &TaskInstance,
        final_answer: &str,
        stages_passed: u32,
    ) -> Result<f64, EnvironmentError> {
        score(task, final_answer, stages_passed)
    }

    fn tools(&self) -> &[ToolDef] {
        &self.tools
    }
}

impl fmt::Display for OutcomeFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OutcomeFlag::Ok => "OK",
            OutcomeFlag::Empty => "EMPTY",
            OutcomeFlag::SchemaViolation => "SCHEMA_VIOLATION",
            OutcomeFlag::ExecError => "EXEC_ERROR",
            OutcomeFlag::WrongTool => "WRONG_TOOL",
            OutcomeFlag::Ungrounded => "UNGROUNDED",
        };
        f.write_str(s)
    }
}
