//! Targeted mutation: turns a blamed episode into trace-grounded feedback
//! and a child genome that differs from its parent in exactly the blamed
//! module's specification.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blame::{BlameReport, DiagnosticEvent};
use crate::env::TaskInstance;
use crate::gateway::{complete, Cassette, ChatRequest, GatewayError, Message, Transport};
use crate::policy::{ModuleKind, PolicyError, PolicyGenome};
use crate::prompts;
use crate::rollout::EpisodeRecord;

/// Hard cap on revised specification length; longer proposals are rejected
/// so prompt growth stays bounded across generations.
pub const MAX_SPEC_CHARS: usize = 8_000;

/// A proposed single-module edit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutationProposal {
    pub target: ModuleKind,
    pub error_mode: String,
    pub edit_summary: String,
    pub revised_spec: String,
    pub feedback: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Error)]
pub enum MutationError {
    #[error("NoMissingTag: {module} satisfies every stage of task {task_id}")]
    NoMissingTag { module: ModuleKind, task_id: String },
    #[error("MutatorOutputUnparseable: {0}")]
    OutputUnparseable(String),
    #[error("UnknownTask: episode references task {0} not present in the suite")]
    UnknownTask(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseMutationError {
    #[error("MissingSection: {0}")]
    MissingSection(&'static str),
    #[error("UnknownTarget: {0:?} is not a module name")]
    UnknownTarget(String),
    #[error("EmptySpec: section 4 carries no revised specification")]
    EmptyRevisedSpec,
}

/// Sections extracted from an editor response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedMutation {
    pub target: ModuleKind,
    pub error_mode: String,
    pub edit_summary: String,
    pub revised_spec: String,
}

/// Splits editor output into its four numbered sections.
///
/// The target parses case-insensitively; the revised spec is everything
/// under section 4 with surrounding blank lines trimmed.
pub fn parse_mutator_output(text: &str) -> Result<ParsedMutation, ParseMutationError> {
    let sections = split_sections(text);
    let target_body = sections[0].ok_or(ParseMutationError::MissingSection("1. Target module"))?;
    let error_body =
        sections[1].ok_or(ParseMutationError::MissingSection("2. Diagnosed error mode"))?;
    let summary_body =
        sections[2].ok_or(ParseMutationError::MissingSection("3. Minimal edit summary"))?;
    let spec_body = sections[3].ok_or(ParseMutationError::MissingSection(
        "4. Revised target module spec",
    ))?;

    let target_token = target_body
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or("");
    let target = ModuleKind::parse(target_token)
        .ok_or_else(|| ParseMutationError::UnknownTarget(target_token.to_string()))?;

    let revised_spec = trim_blank_edges(spec_body);
    if revised_spec.is_empty() {
        return Err(ParseMutationError::EmptyRevisedSpec);
    }
    Ok(ParsedMutation {
        target,
        error_mode: error_body.trim().to_string(),
        edit_summary: summary_body.trim().to_string(),
        revised_spec,
    })
}

fn trim_blank_edges(text: &str) -> String {
    text.trim_matches(['\n', '\r']).trim_end().to_string()
}

fn split_sections(text: &str) -> [Option<&str>; 4] {
    let headers = ["1.", "2.", "3.", "4."];
    let mut starts: [Option<(usize, usize)>; 4] = [None; 4];
    let mut cursor = 0usize;
    for (i, header) in headers.iter().enumerate() {
        let mut offset = cursor;
        for line in text[cursor..].lines() {
            let line_start = offset;
            offset += line.len() + 1;
            if line.trim_start().starts_with(header) {
                starts[i] = Some((line_start, line_start + line.len()));
                cursor = (line_start + line.len()).min(text.len());
                break;
            }
        }
    }
    let mut bodies: [Option<&str>; 4] = [None; 4];
    for i in 0..4 {
        if let Some((_, header_end)) = starts[i] {
            let body_end = starts[i + 1..]
                .iter()
                .flatten()
                .map(|(s, _)| *s)
                .next()
                .unwrap_or(text.len());
            bodies[i] = Some(&text[header_end.min(body_end)..body_end]);
        }
    }
    bodies
}

/// A mutation strategy.
pub trait Mutator {
    fn propose(
        &mut self,
        episode: &EpisodeRecord,
        target: ModuleKind,
        genome: &PolicyGenome,
        diagnostics: &[DiagnosticEvent],
        blame: &BlameReport,
    ) -> Result<MutationProposal, MutationError>;
}

/// Deterministic mutator for the scripted environment: appends a RULE line
/// for the first tag the blamed module is missing on the blamed task.
pub struct OracleMutator {
    tasks: BTreeMap<String, TaskInstance>,
}

impl OracleMutator {
    pub fn new(tasks: impl IntoIterator<Item = TaskInstance>) -> OracleMutator {
        OracleMutator {
            tasks: tasks.into_iter().map(|t| (t.id.clone(), t)).collect(),
        }
    }
}

impl Mutator for OracleMutator {
    fn propose(
        &mut self,
        episode: &EpisodeRecord,
        target: ModuleKind,
        genome: &PolicyGenome,
        _diagnostics: &[DiagnosticEvent],
        _blame: &BlameReport,
    ) -> Result<MutationProposal, MutationError> {
        let task = self
            .tasks
            .get(&episode.task_id)
            .ok_or_else(|| MutationError::UnknownTask(episode.task_id.clone()))?;
        let have = crate::env::scripted_tags(genome.spec_text(target));
        // Earliest stage of the blamed module that still misses a tag.
        let mut found: Option<(u32, String)> = None;
        for subgoal in 0..task.num_subgoals {
            let required = task.required_tags(subgoal, target);
            if let Some(tag) = required.difference(&have).next() {
                found = Some((subgoal, tag.clone()));
                break;
            }
        }
        let (subgoal, tag) = found.ok_or(MutationError::NoMissingTag {
            module: target,
            task_id: episode.task_id.clone(),
        })?;
        let feedback =
            format!("Stage ({subgoal}, {target}) failed; missing capability {tag}.");
        let revised_spec = format!("{}\nRULE: {tag}", genome.spec_text(target));
        Ok(MutationProposal {
            target,
            error_mode: format!("missing capability {tag} at stage ({subgoal}, {target})"),
            edit_summary: format!("declare capability {tag}"),
            revised_spec,
            feedback,
            warnings: Vec::new(),
        })
    }
}

/// Model-backed mutator: renders the editor meta prompt, parses the four
/// sections, and retries once on a parse failure.
pub struct ModelMutator<'a> {
    pub model_id: String,
    pub temperature: f64,
    pub max_output_chars: usize,
    pub cassette: &'a Cassette,
    pub transport: &'a dyn Transport,
    pub tasks: BTreeMap<String, TaskInstance>,
}

impl ModelMutator<'_> {
    fn render_prompt(
        &self,
        episode: &EpisodeRecord,
        target: ModuleKind,
        genome: &PolicyGenome,
        blame: &BlameReport,
    ) -> Result<String, GatewayError> {
        let task_line = match self.tasks.get(&episode.task_id) {
            Some(task) => format!("{}: {}", task.id, task.instruction),
            None => episode.task_id.clone(),
        };
        let packet = format!(
            "task: {task_line}\nfinal answer: {:?}\nreward: {}\ntrajectory slice:\n{}",
            episode.final_answer,
            episode.reward,
            render_module_slice(episode, target),
        );
        let rationale = format!(
            "diagnosis: {}\nscores: {}\nevidence:\n{}",
            blame.diagnosis,
            blame
                .scores
                .iter()
                .map(|(m, s)| format!("{m} {s}"))
                .collect::<Vec<_>>()
                .join(", "),
            blame.evidence.join("\n"),
        );
        let bindings = BTreeMap::from([
            ("target_module".to_string(), target.name().to_string()),
            (
                "current_spec".to_string(),
                genome.spec_text(target).to_string(),
            ),
            ("episode_packet".to_string(), packet),
            ("blame_rationale".to_string(), rationale),
        ]);
        Ok(crate::gateway::render_template(prompts::MUTATOR_TEMPLATE, &bindings)?.text)
    }
}

fn render_module_slice(episode: &EpisodeRecord, target: ModuleKind) -> String {
    let mut out = String::new();
    for step in &episode.trajectory.steps {
        let marker = if step.acting_module == target { ">" } else { " " };
        let observation = step
            .observation
            .as_ref()
            .map(|o| format!(" -> {}", o.payload))
            .unwrap_or_default();
        out.push_str(&format!(
            "{marker} t{} [{}]{}\n",
            step.index, step.acting_module, observation
        ));
    }
    out
}

impl Mutator for ModelMutator<'_> {
    fn propose(
        &mut self,
        episode: &EpisodeRecord,
        target: ModuleKind,
        genome: &PolicyGenome,
        _diagnostics: &[DiagnosticEvent],
        blame: &BlameReport,
    ) -> Result<MutationProposal, MutationError> {
        let prompt = self.render_prompt(episode, target, genome, blame)?;
        let mut messages = vec![Message::user(prompt)];
        let mut last_error = String::new();
        for attempt in 0..2 {
            if attempt == 1 {
                messages.push(Message::user(prompts::FORMAT_RETRY_NOTE.to_string()));
            }
            let mut request = ChatRequest::new(self.model_id.clone(), messages.clone());
            request.temperature = self.temperature;
            request.max_output_chars = self.max_output_chars;
            let response = complete(&request, self.cassette, self.transport)?;
            match parse_mutator_output(&response) {
                Ok(parsed) => {
                    if parsed.revised_spec.len() > MAX_SPEC_CHARS {
                        return Err(MutationError::OutputUnparseable(format!(
                            "revised spec of {} chars exceeds the {MAX_SPEC_CHARS} char cap",
                            parsed.revised_spec.len()
                        )));
                    }
                    let mut warnings = Vec::new();
                    if parsed.target != target {
                        // The requested blame target wins.
                        let warning = format!(
                            "TargetMismatch: editor answered for {}, blame targeted {}",
                            parsed.target, target
                        );
                        log::warn!("{warning}");
                        warnings.push(warning);
                    }
                    let feedback = format!(
                        "{}\nEdit: {}",
                        parsed.error_mode, parsed.edit_summary
                    );
                    return Ok(MutationProposal {
                        target,
                        error_mode: parsed.error_mode,
                        edit_summary: parsed.edit_summary,
                        revised_spec: parsed.revised_spec,
                        feedback,
                        warnings,
                    });
                }
                Err(err) => {
                    last_error = err.to_string();
                    messages.push(Message {
                        role: crate::gateway::Role::Assistant,
                        content: response,
                    });
                }
            }
        }
        Err(MutationError::OutputUnparseable(format!(
            "after one retry: {last_error}"
        )))
    }
}

/// Produces a mutation proposal for the blamed module.
pub fn generate_feedback(
    episode: &EpisodeRecord,
    target: ModuleKind,
    genome: &PolicyGenome,
    diagnostics: &[DiagnosticEvent],
    blame: &BlameReport,
    mutator: &mut dyn Mutator,
) -> Result<MutationProposal, MutationError> {
    mutator.propose(episode, target, genome, diagnostics, blame)
}

/// Applies a proposal, yielding a child genome that differs from the
/// parent in exactly the proposal's target module.
pub fn build_child(
    parent: &PolicyGenome,
    proposal: &MutationProposal,
    generation: u32,
) -> Result<PolicyGenome, PolicyError> {
    parent.with_replaced_module(proposal.target, &proposal.revised_spec, generation)
}
