//! Blame attribution: converts an episode into module-wise blame scores and
//! a single mutation target.
//!
//! Diagnostics are extracted mechanically from the trajectory's outcome
//! flags. The blamer itself is pluggable: the oracle blames the module of
//! the earliest failure event, the random blamer picks a uniform target
//! (ablation baseline), and the model-backed blamer renders the diagnostic
//! judge meta prompt and parses its scored output.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{OutcomeFlag, TaskInstance};
use crate::gateway::{complete, Cassette, ChatRequest, GatewayError, Message, Transport};
use crate::policy::ModuleKind;
use crate::prompts;
use crate::rollout::{EpisodeRecord, Trajectory};

/// The signal classes a trajectory can carry about one module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DiagnosticKind {
    ToolChoiceOutcome,
    ArgumentValidity,
    ExecutionOutcome,
    SynthesisGrounding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Pass,
    Fail,
}

/// One structured trace-derived signal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosticEvent {
    pub step_index: u32,
    pub module: ModuleKind,
    pub kind: DiagnosticKind,
    pub verdict: Verdict,
    pub detail: String,
}

/// Module-wise blame scores plus the selected mutation target.
///
/// The target always attains the maximum score; ties resolve to the
/// earliest pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlameReport {
    pub scores: BTreeMap<ModuleKind, f64>,
    pub target: ModuleKind,
    pub evidence: Vec<String>,
    pub diagnosis: String,
}

#[derive(Debug, Error)]
pub enum BlameError {
    #[error("EmptyTrajectory: cannot extract diagnostics from zero steps")]
    EmptyTrajectory,
    #[error("EmptyBatch: no episodes to select from")]
    EmptyBatch,
    #[error("PerfectEpisode: blame requires reward < 1")]
    PerfectEpisode,
    #[error("NoFailureEvidence: reward < 1 but the diagnostics carry no FAIL event")]
    NoFailureEvidence,
    #[error("BlamerOutputUnparseable: {0}")]
    OutputUnparseable(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseBlameError {
    #[error("MissingSection: {0}")]
    MissingSection(&'static str),
    #[error("MissingScore: no score line for {0}")]
    MissingScore(ModuleKind),
    #[error("NonNumericScore: {module} score {token:?} is not a number")]
    NonNumericScore { module: ModuleKind, token: String },
}

/// The diagnostic kind a module's stage reports when it passes.
fn characteristic_kind(module: ModuleKind) -> DiagnosticKind {
    match module {
        ModuleKind::Planner => DiagnosticKind::ExecutionOutcome,
        ModuleKind::Selector => DiagnosticKind::ToolChoiceOutcome,
        ModuleKind::Caller => DiagnosticKind::ArgumentValidity,
        ModuleKind::Synthesizer => DiagnosticKind::SynthesisGrounding,
    }
}

/// Extracts one diagnostic event per observed stage step.
///
/// Failure flags map to fixed (module, kind) pairs: WRONG_TOOL to the
/// selector's tool choice, SCHEMA_VIOLATION to the caller's argument
/// validity, EXEC_ERROR to the caller's execution outcome, UNGROUNDED to
/// the synthesizer's grounding, and EMPTY at the planning stage to the
/// planner's execution outcome.
pub fn extract_diagnostics(
    trajectory: &Trajectory,
) -> Result<Vec<DiagnosticEvent>, BlameError> {
    if trajectory.steps.is_empty() {
        return Err(BlameError::EmptyTrajectory);
    }
    let mut events = Vec::new();
    for step in &trajectory.steps {
        let Some(observation) = &step.observation else {
            continue;
        };
        if observation.is_ok() {
            events.push(DiagnosticEvent {
                step_index: step.index,
                module: step.acting_module,
                kind: characteristic_kind(step.acting_module),
                verdict: Verdict::Pass,
                detail: observation.payload.clone(),
            });
            continue;
        }
        for flag in &observation.outcome_flags {
            let (module, kind) = match flag {
                OutcomeFlag::WrongTool => {
                    (ModuleKind::Selector, DiagnosticKind::ToolChoiceOutcome)
                }
                OutcomeFlag::SchemaViolation => {
                    (ModuleKind::Caller, DiagnosticKind::ArgumentValidity)
                }
                OutcomeFlag::ExecError => {
                    (ModuleKind::Caller, DiagnosticKind::ExecutionOutcome)
                }
                OutcomeFlag::Ungrounded => {
                    (ModuleKind::Synthesizer, DiagnosticKind::SynthesisGrounding)
                }
                OutcomeFlag::Empty => (step.acting_module, DiagnosticKind::ExecutionOutcome),
                OutcomeFlag::Ok => continue,
            };
            events.push(DiagnosticEvent {
                step_index: step.index,
                module,
                kind,
                verdict: Verdict::Fail,
                detail: observation.payload.clone(),
            });
        }
    }
    Ok(events)
}

/// Picks the episode to blame: the lowest reward wins, ties resolve to the
/// earliest batch position. All-perfect batches yield `None`.
pub fn select_blame_episode(
    episodes: &[EpisodeRecord],
) -> Result<Option<&EpisodeRecord>, BlameError> {
    if episodes.is_empty() {
        return Err(BlameError::EmptyBatch);
    }
    let mut worst: Option<&EpisodeRecord> = None;
    for episode in episodes {
        match worst {
            Some(current) if episode.reward >= current.reward => {}
            _ => worst = Some(episode),
        }
    }
    let worst = worst.expect("batch is non-empty");
    Ok((worst.reward < 1.0).then_some(worst))
}

/// Scores parsed from a judge response, before target selection.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedBlame {
    pub scores: BTreeMap<ModuleKind, f64>,
    pub evidence: Vec<String>,
    pub diagnosis: String,
    pub warnings: Vec<String>,
    // Raw values before clamping; target selection uses these so that a
    // uniform rescaling never changes the chosen module.
    raw_scores: BTreeMap<ModuleKind, f64>,
}

/// Splits judge output into its three numbered sections and extracts the
/// four scores, clamping each into [0, 1].
pub fn parse_blamer_output(text: &str) -> Result<ParsedBlame, ParseBlameError> {
    let sections = split_numbered_sections(text, &["1.", "2.", "3."]);
    let scores_body = sections[0].ok_or(ParseBlameError::MissingSection("1. Scores"))?;
    let evidence_body = sections[1].ok_or(ParseBlameError::MissingSection("2. Evidence"))?;
    let diagnosis_body =
        sections[2].ok_or(ParseBlameError::MissingSection("3. One sentence diagnosis"))?;

    let mut raw_scores = BTreeMap::new();
    let mut warnings = Vec::new();
    for module in ModuleKind::PIPELINE {
        let mut found = None;
        for line in scores_body.lines() {
            let line = line.trim();
            let Some(rest) = strip_prefix_ci(line, module.name()) else {
                continue;
            };
            let token = rest.trim_start_matches([':', '=']).trim();
            if token.is_empty() {
                continue;
            }
            let token = token.split_whitespace().next().unwrap_or(token);
            let value: f64 = token.parse().map_err(|_| ParseBlameError::NonNumericScore {
                module,
                token: token.to_string(),
            })?;
            if !value.is_finite() {
                return Err(ParseBlameError::NonNumericScore {
                    module,
                    token: token.to_string(),
                });
            }
            found = Some(value);
            break;
        }
        let value = found.ok_or(ParseBlameError::MissingScore(module))?;
        if !(0.0..=1.0).contains(&value) {
            warnings.push(format!(
                "{} score {} clamped into [0, 1]",
                module.name(),
                value
            ));
        }
        raw_scores.insert(module, value);
    }

    let scores = raw_scores
        .iter()
        .map(|(m, v)| (*m, v.clamp(0.0, 1.0)))
        .collect();
    let evidence = evidence_body
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    let diagnosis = diagnosis_body.trim().to_string();
    Ok(ParsedBlame {
        scores,
        evidence,
        diagnosis,
        warnings,
        raw_scores,
    })
}

fn strip_prefix_ci<'a>(line: &'a str, prefix: &str) -> Option<&'a str> {
    let head = line.get(..prefix.len())?;
    if head.eq_ignore_ascii_case(prefix) {
        Some(&line[prefix.len()..])
    } else {
        None
    }
}

/// Returns the body between each numbered header and the next, or `None`
/// for headers that never appear (in order).
fn split_numbered_sections<'a>(
    text: &'a str,
    headers: &[&str],
) -> Vec<Option<&'a str>> {
    let mut starts: Vec<Option<(usize, usize)>> = Vec::with_capacity(headers.len());
    let mut cursor = 0usize;
    for header in headers {
        let mut found = None;
        let mut offset = cursor;
        for line in text[cursor..].lines() {
            let line_start = offset;
            offset += line.len() + 1;
            if line.trim_start().starts_with(header) {
                found = Some((line_start, line_start + line.len()));
                break;
            }
        }
        if let Some((_, end)) = found {
            cursor = end.min(text.len());
        }
        starts.push(found);
    }
    let mut bodies = Vec::with_capacity(headers.len());
    for (i, slot) in starts.iter().enumerate() {
        match slot {
            None => bodies.push(None),
            Some((_, header_end)) => {
                let body_end = starts[i + 1..]
                    .iter()
                    .flatten()
                    .map(|(s, _)| *s)
                    .next()
                    .unwrap_or(text.len());
                bodies.push(Some(&text[(*header_end).min(body_end)..body_end]));
            }
        }
    }
    bodies
}

/// Argmax over raw scores with the earliest-pipeline-stage tie-break.
fn argmax_target(raw_scores: &BTreeMap<ModuleKind, f64>) -> ModuleKind {
    let mut target = ModuleKind::Planner;
    let mut best = f64::NEG_INFINITY;
    for module in ModuleKind::PIPELINE {
        let score = raw_scores.get(&module).copied().unwrap_or(0.0);
        if score > best {
            best = score;
            target = module;
        }
    }
    target
}

impl ParsedBlame {
    /// Builds the final report, resolving the target on raw scores.
    pub fn into_report(self) -> BlameReport {
        let target = argmax_target(&self.raw_scores);
        BlameReport {
            scores: self.scores,
            target,
            evidence: self.evidence,
            diagnosis: self.diagnosis,
        }
    }
}

/// A blame strategy.
pub trait Blamer {
    fn blame(
        &mut self,
        episode: &EpisodeRecord,
        diagnostics: &[DiagnosticEvent],
    ) -> Result<BlameReport, BlameError>;
}

/// Blames the module of the earliest FAIL event with full confidence.
#[derive(Debug, Clone, Default)]
pub struct OracleBlamer;

impl Blamer for OracleBlamer {
    fn blame(
        &mut self,
        _episode: &EpisodeRecord,
        diagnostics: &[DiagnosticEvent],
    ) -> Result<BlameReport, BlameError> {
        let first_fail = diagnostics
            .iter()
            .find(|e| e.verdict == Verdict::Fail)
            .ok_or(BlameError::NoFailureEvidence)?;
        let mut scores = BTreeMap::new();
        for module in ModuleKind::PIPELINE {
            scores.insert(module, f64::from(u8::from(module == first_fail.module)));
        }
        Ok(BlameReport {
            scores,
            target: first_fail.module,
            evidence: vec![first_fail.detail.clone()],
            diagnosis: format!(
                "{} caused the earliest failure at step {}",
                first_fail.module, first_fail.step_index
            ),
        })
    }
}

/// Uniform-random targeting, the ablation baseline.
pub struct RandomBlamer {
    rng: ChaCha12Rng,
}

impl RandomBlamer {
    pub fn new(seed: u64) -> RandomBlamer {
        use rand::SeedableRng;
        RandomBlamer {
            rng: ChaCha12Rng::seed_from_u64(seed),
        }
    }
}

impl Blamer for RandomBlamer {
    fn blame(
        &mut self,
        _episode: &EpisodeRecord,
        _diagnostics: &[DiagnosticEvent],
    ) -> Result<BlameReport, BlameError> {
        let target = ModuleKind::PIPELINE[self.rng.gen_range(0..4)];
        let mut scores = BTreeMap::new();
        for module in ModuleKind::PIPELINE {
            scores.insert(module, f64::from(u8::from(module == target)));
        }
        Ok(BlameReport {
            scores,
            target,
            evidence: vec!["target drawn uniformly at random".to_string()],
            diagnosis: format!("{target} selected at random"),
        })
    }
}

/// Model-backed judge: renders the meta prompt, parses the scored reply,
/// retries once on a parse failure, then falls back to the earliest FAIL
/// event's module.
pub struct ModelBlamer<'a> {
    pub model_id: String,
    pub temperature: f64,
    pub max_output_chars: usize,
    pub cassette: &'a Cassette,
    pub transport: &'a dyn Transport,
    pub tasks: BTreeMap<String, TaskInstance>,
}

impl ModelBlamer<'_> {
    fn render_prompt(
        &self,
        episode: &EpisodeRecord,
        diagnostics: &[DiagnosticEvent],
    ) -> Result<String, GatewayError> {
        let task_text = match self.tasks.get(&episode.task_id) {
            Some(task) => format!("{}: {}", task.id, task.instruction),
            None => episode.task_id.clone(),
        };
        let bindings = BTreeMap::from([
            ("task".to_string(), task_text),
            (
                "trajectory".to_string(),
                render_trajectory(&episode.trajectory),
            ),
            ("module_events".to_string(), render_events(diagnostics)),
            (
                "outcome".to_string(),
                if episode.reward >= 1.0 {
                    format!("1 (success), reward {}", episode.reward)
                } else {
                    format!("0 (fail), reward {}", episode.reward)
                },
            ),
        ]);
        Ok(crate::gateway::render_template(prompts::BLAMER_TEMPLATE, &bindings)?.text)
    }
}

impl Blamer for ModelBlamer<'_> {
    fn blame(
        &mut self,
        episode: &EpisodeRecord,
        diagnostics: &[DiagnosticEvent],
    ) -> Result<BlameReport, BlameError> {
        let prompt = self.render_prompt(episode, diagnostics)?;
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
            match parse_blamer_output(&response) {
                Ok(parsed) => {
                    for warning in &parsed.warnings {
                        log::warn!("blamer output: {warning}");
                    }
                    return Ok(parsed.into_report());
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
        // Fallback: the most severe failure signal is the earliest FAIL.
        log::warn!("blamer output unparseable after retry ({last_error}); falling back");
        let mut oracle = OracleBlamer;
        let mut report = oracle.blame(episode, diagnostics)?;
        report
            .diagnosis
            .push_str(" [fallback after unparseable blamer output]");
        Ok(report)
    }
}

fn render_trajectory(trajectory: &Trajectory) -> String {
    let mut out = String::new();
    for step in &trajectory.steps {
        let action = match &step.action {
            crate::rollout::Action::Reason { text } => format!("REASON {text}"),
            crate::rollout::Action::ToolCall { tool, arguments } => format!(
                "TOOL_CALL {tool} {}",
                serde_json::to_string(arguments).unwrap_or_default()
            ),
            crate::rollout::Action::Finish { answer } => format!("FINISH {answer:?}"),
        };
        let observation = match &step.observation {
            Some(obs) => {
                let flags: Vec<String> =
                    obs.outcome_flags.iter().map(|f| f.to_string()).collect();
                format!(" -> [{}] {}", flags.join(","), obs.payload)
            }
            None => String::new(),
        };
        out.push_str(&format!(
            "t{} [{}] {}{}\n",
            step.index, step.acting_module, action, observation
        ));
    }
    out
}

fn render_events(diagnostics: &[DiagnosticEvent]) -> String {
    let mut out = String::new();
    for event in diagnostics {
        out.push_str(&format!(
            "step {} module {} kind {:?} verdict {:?}: {}\n",
            event.step_index, event.module, event.kind, event.verdict, event.detail
        ));
    }
    out
}

/// Validates preconditions and delegates to the blamer.
///
/// Only imperfect episodes may be blamed; a sub-unit reward with no FAIL
/// event signals an environment/diagnostics inconsistency.
pub fn assign_blame(
    episode: &EpisodeRecord,
    diagnostics: &[DiagnosticEvent],
    blamer: &mut dyn Blamer,
) -> Result<BlameReport, BlameError> {
    if episode.reward >= 1.0 {
        return Err(BlameError::PerfectEpisode);
    }
    if !diagnostics.iter().any(|e| e.verdict == Verdict::Fail) {
        return Err(BlameError::NoFailureEvidence);
    }
    blamer.blame(episode, diagnostics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{ScriptedEnvironment, SkillRequirement};
    use crate::policy::PolicyGenome;
    use crate::rollout::{execute_episode, ScriptedRuntime};
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn failing_episode(module: ModuleKind) -> EpisodeRecord {
        let texts = BTreeMap::from([
            (ModuleKind::Planner, "p".to_string()),
            (ModuleKind::Selector, "s".to_string()),
            (ModuleKind::Caller, "c".to_string()),
            (ModuleKind::Synthesizer, "y".to_string()),
        ]);
        let genome = PolicyGenome::new_seed(&texts).unwrap();
        let task = TaskInstance {
            id: "t".to_string(),
            instruction: "i".to_string(),
            num_subgoals: 1,
            gold_answer: "g".to_string(),
            required_skills: vec![SkillRequirement {
                subgoal: 0,
                module,
                tags: BTreeSet::from(["needed".to_string()]),
            }],
        };
        let env = ScriptedEnvironment::with_stage_tools();
        execute_episode(&genome, &task, &env, &ScriptedRuntime)
    }

    #[test]
    fn schema_violation_maps_to_caller_argument_validity() {
        let episode = failing_episode(ModuleKind::Caller);
        let events = extract_diagnostics(&episode.trajectory).unwrap();
        let fail = events.iter().find(|e| e.verdict == Verdict::Fail).unwrap();
        assert_eq!(fail.step_index, 2);
        assert_eq!(fail.module, ModuleKind::Caller);
        assert_eq!(fail.kind, DiagnosticKind::ArgumentValidity);
    }

    #[test]
    fn all_ok_trajectory_yields_only_pass_events() {
        let episode = failing_episode(ModuleKind::Synthesizer);
        // Take the passing prefix: first three stage steps.
        let prefix = Trajectory {
            steps: episode.trajectory.steps[..3].to_vec(),
        };
        let events = extract_diagnostics(&prefix).unwrap();
        assert_eq!(events.len(), 3);
        assert!(events.iter().all(|e| e.verdict == Verdict::Pass));
    }

    #[test]
    fn truncated_trajectory_has_single_trailing_fail() {
        let episode = failing_episode(ModuleKind::Caller);
        let events = extract_diagnostics(&episode.trajectory).unwrap();
        let fails: Vec<_> = events.iter().filter(|e| e.verdict == Verdict::Fail).collect();
        assert_eq!(fails.len(), 1);
        assert_eq!(events.last().unwrap().verdict, Verdict::Fail);
    }

    #[test]
    fn empty_trajectory_rejected() {
        let t = Trajectory { steps: vec![] };
        assert!(matches!(
            extract_diagnostics(&t),
            Err(BlameError::EmptyTrajectory)
        ));
    }

    #[test]
    fn planner_empty_maps_to_planner() {
        let episode = failing_episode(ModuleKind::Planner);
        let events = extract_diagnostics(&episode.trajectory).unwrap();
        let fail = events.iter().find(|e| e.verdict == Verdict::Fail).unwrap();
        assert_eq!(fail.module, ModuleKind::Planner);
        assert_eq!(fail.kind, DiagnosticKind::ExecutionOutcome);
    }

    #[test]
    fn oracle_blames_first_failure_with_unit_score() {
        let episode = failing_episode(ModuleKind::Caller);
        let events = extract_diagnostics(&episode.trajectory).unwrap();
        let report = assign_blame(&episode, &events, &mut OracleBlamer).unwrap();
        assert_eq!(report.target, ModuleKind::Caller);
        assert_eq!(report.scores[&ModuleKind::Planner], 0.0);
        assert_eq!(report.scores[&ModuleKind::Selector], 0.0);
        assert_eq!(report.scores[&ModuleKind::Caller], 1.0);
        assert_eq!(report.scores[&ModuleKind::Synthesizer], 0.0);
    }

    #[test]
    fn perfect_episode_not_blamed() {
        let mut episode = failing_episode(ModuleKind::Caller);
        episode.reward = 1.0;
        let events = extract_diagnostics(&episode.trajectory).unwrap();
        assert!(matches!(
            assign_blame(&episode, &events, &mut OracleBlamer),
            Err(BlameError::PerfectEpisode)
        ));
    }

    #[test]
    fn no_failure_evidence_detected() {
        let episode = failing_episode(ModuleKind::Synthesizer);
        let prefix = Trajectory {
            steps: episode.trajectory.steps[..3].to_vec(),
        };
        let mut broken = episode.clone();
        broken.trajectory = prefix.clone();
        broken.reward = 0.5;
        let events = extract_diagnostics(&prefix).unwrap();
        assert!(matches!(
            assign_blame(&broken, &events, &mut OracleBlamer),
            Err(BlameError::NoFailureEvidence)
        ));
    }

    #[test]
    fn worst_episode_selection() {
        let mut episodes = vec![
            failing_episode(ModuleKind::Caller),
            failing_episode(ModuleKind::Selector),
            failing_episode(ModuleKind::Synthesizer),
        ];
        episodes[0].reward = 1.0;
        episodes[1].reward = 0.25;
        episodes[2].reward = 0.5;
        let picked = select_blame_episode(&episodes).unwrap().unwrap();
        assert!(std::ptr::eq(picked, &episodes[1]));
    }

    #[test]
    fn all_perfect_batch_selects_none() {
        let mut episodes = vec![failing_episode(ModuleKind::Caller)];
        episodes[0].reward = 1.0;
        assert!(select_blame_episode(&episodes).unwrap().is_none());
    }

    #[test]
    fn reward_tie_resolves_to_earliest() {
        let mut episodes = vec![
            failing_episode(ModuleKind::Caller),
            failing_episode(ModuleKind::Selector),
            failing_episode(ModuleKind::Synthesizer),
        ];
        episodes[0].reward = 0.5;
        episodes[1].reward = 0.5;
        episodes[2].reward = 1.0;
        let picked = select_blame_episode(&episodes).unwrap().unwrap();
        assert!(std::ptr::eq(picked, &episodes[0]));
    }

    #[test]
    fn empty_batch_rejected() {
        assert!(matches!(
            select_blame_episode(&[]),
            Err(BlameError::EmptyBatch)
        ));
    }

    const WELL_FORMED: &str = "1. Scores\nplanner 0.1\nselector 0.8\ncaller 0.2\nsynthesizer 0.0\n\n2. Evidence\n- selector chose the wrong tool\n- caller arguments were valid\n\n3. One sentence diagnosis\nThe selector picked an unrelated tool.\n";

    #[test]
    fn well_formed_output_parses_exactly() {
        let parsed = parse_blamer_output(WELL_FORMED).unwrap();
        assert_eq!(parsed.scores[&ModuleKind::Planner], 0.1);
        assert_eq!(parsed.scores[&ModuleKind::Selector], 0.8);
        assert_eq!(parsed.scores[&ModuleKind::Caller], 0.2);
        assert_eq!(parsed.scores[&ModuleKind::Synthesizer], 0.0);
        assert_eq!(parsed.evidence.len(), 2);
        assert_eq!(
            parsed.diagnosis,
            "The selector picked an unrelated tool."
        );
        assert!(parsed.warnings.is_empty());
        let report = parsed.into_report();
        assert_eq!(report.target, ModuleKind::Selector);
    }

    #[test]
    fn missing_synthesizer_line_is_missing_score() {
        let text = WELL_FORMED.replace("synthesizer 0.0\n", "");
        assert_eq!(
            parse_blamer_output(&text).unwrap_err(),
            ParseBlameError::MissingScore(ModuleKind::Synthesizer)
        );
    }

    #[test]
    fn out_of_range_score_clamped_with_warning() {
        let text = WELL_FORMED.replace("selector 0.8", "selector 1.3");
        let parsed = parse_blamer_output(&text).unwrap();
        assert_eq!(parsed.scores[&ModuleKind::Selector], 1.0);
        assert_eq!(parsed.warnings.len(), 1);
        assert!(parsed.warnings[0].contains("selector"));
    }

    #[test]
    fn missing_section_detected() {
        let text = "planner 0.1\nselector 0.8\ncaller 0.2\nsynthesizer 0.0";
        assert_eq!(
            parse_blamer_output(text).unwrap_err(),
            ParseBlameError::MissingSection("1. Scores")
        );
    }

    #[test]
    fn non_numeric_score_detected() {
        let text = WELL_FORMED.replace("caller 0.2", "caller high");
        assert!(matches!(
            parse_blamer_output(&text).unwrap_err(),
            ParseBlameError::NonNumericScore {
                module: ModuleKind::Caller,
                ..
            }
        ));
    }

    #[test]
    fn multibyte_noise_lines_are_skipped_not_panicked() {
        let text = WELL_FORMED.replace(
            "2. Evidence",
            "sélecteur étrange\n日本語のメモ\n\n2. Evidence",
        );
        let parsed = parse_blamer_output(&text).unwrap();
        assert_eq!(parsed.scores[&ModuleKind::Selector], 0.8);
    }

    #[test]
    fn score_tie_resolves_to_earliest_pipeline_stage() {
        let text = "1. Scores\nplanner 0.6\nselector 0.6\ncaller 0.1\nsynthesizer 0.1\n\n2. Evidence\n- both early stages look wrong\n\n3. One sentence diagnosis\nEarliest causal mistake preferred.\n";
        let report = parse_blamer_output(text).unwrap().into_report();
        assert_eq!(report.target, ModuleKind::Planner);
    }

    struct SequencedTransport {
        replies: std::sync::Mutex<std::collections::VecDeque<String>>,
    }

    impl SequencedTransport {
        fn new(replies: &[&str]) -> SequencedTransport {
            SequencedTransport {
                replies: std::sync::Mutex::new(
                    replies.iter().map(|r| r.to_string()).collect(),
                ),
            }
        }
    }

    impl crate::gateway::Transport for SequencedTransport {
        fn send(&self, _request: &crate::gateway::ChatRequest) -> Result<String, GatewayError> {
            self.replies
                .lock()
                .unwrap()
                .pop_front()
                .ok_or_else(|| GatewayError::Transport("no scripted reply left".to_string()))
        }
    }

    fn model_blamer<'a>(
        cassette: &'a Cassette,
        transport: &'a dyn crate::gateway::Transport,
    ) -> ModelBlamer<'a> {
        ModelBlamer {
            model_id: "stub".to_string(),
            temperature: 0.0,
            max_output_chars: 16_000,
            cassette,
            transport,
            tasks: BTreeMap::new(),
        }
    }

    #[test]
    fn model_blamer_retries_once_then_parses() {
        let episode = failing_episode(ModuleKind::Selector);
        let events = extract_diagnostics(&episode.trajectory).unwrap();
        let cassette = Cassette::in_memory(crate::gateway::CassetteMode::Passthrough);
        let transport = SequencedTransport::new(&["not the format", WELL_FORMED]);
        let mut blamer = model_blamer(&cassette, &transport);
        let report = assign_blame(&episode, &events, &mut blamer).unwrap();
        assert_eq!(report.target, ModuleKind::Selector);
        assert!(!report.diagnosis.contains("fallback"));
    }

    #[test]
    fn model_blamer_falls_back_to_earliest_failure_after_retry() {
        let episode = failing_episode(ModuleKind::Caller);
        let events = extract_diagnostics(&episode.trajectory).unwrap();
        let cassette = Cassette::in_memory(crate::gateway::CassetteMode::Passthrough);
        let transport = SequencedTransport::new(&["garbage", "still garbage"]);
        let mut blamer = model_blamer(&cassette, &transport);
        let report = assign_blame(&episode, &events, &mut blamer).unwrap();
        assert_eq!(report.target, ModuleKind::Caller);
        assert!(report.diagnosis.contains("[fallback"));
    }

    #[test]
    fn random_blamer_is_deterministic_per_seed() {
        let episode = failing_episode(ModuleKind::Caller);
        let events = extract_diagnostics(&episode.trajectory).unwrap();
        let seq1: Vec<ModuleKind> = {
            let mut blamer = RandomBlamer::new(7);
            (0..8)
                .map(|_| assign_blame(&episode, &events, &mut blamer).unwrap().target)
                .collect()
        };
        let seq2: Vec<ModuleKind> = {
            let mut blamer = RandomBlamer::new(7);
            (0..8)
                .map(|_| assign_blame(&episode, &events, &mut blamer).unwrap().target)
                .collect()
        };
        assert_eq!(seq1, seq2);
    }

    proptest! {
        // Report invariant: the target attains the maximum score, ties
        // resolved toward the earliest stage.
        #[test]
        fn target_attains_maximum(
            scores in proptest::collection::vec(0.0f64..=1.0, 4),
        ) {
            let text = format!(
                "1. Scores\nplanner {}\nselector {}\ncaller {}\nsynthesizer {}\n\n2. Evidence\n- e\n\n3. One sentence diagnosis\nd\n",
                scores[0], scores[1], scores[2], scores[3]
            );
            let report = parse_blamer_output(&text).unwrap().into_report();
            let target_score = report.scores[&report.target];
            for module in ModuleKind::PIPELINE {
                prop_assert!(target_score >= report.scores[&module]);
                if (report.scores[&module] - target_score).abs() < f64::EPSILON {
                    prop_assert!(
                        report.target.pipeline_index() <= module.pipeline_index()
                    );
                }
            }
        }

        // Scaling all raw scores by a positive constant leaves the target
        // unchanged (selection happens before clamping).
        #[test]
        fn target_is_scale_free(
            scores in proptest::collection::vec(0.01f64..=1.0, 4),
            scale in 0.1f64..=10.0,
        ) {
            let text = |s: &[f64]| format!(
                "1. Scores\nplanner {}\nselector {}\ncaller {}\nsynthesizer {}\n\n2. Evidence\n- e\n\n3. One sentence diagnosis\nd\n",
                s[0], s[1], s[2], s[3]
            );
            let base = parse_blamer_output(&text(&scores)).unwrap().into_report();
            let scaled_scores: Vec<f64> = scores.iter().map(|s| s * scale).collect();
            let scaled = parse_blamer_output(&text(&scaled_scores)).unwrap().into_report();
            prop_assert_eq!(base.target, scaled.target);
        }
    }
}
