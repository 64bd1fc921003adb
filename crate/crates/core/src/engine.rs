//! The self-evolving optimization loop: sample a parent by win frequency,
//! roll it out on a mini-batch, blame one module, mutate only that module,
//! accept the child on strict mini-batch improvement, then re-select the
//! population by instance-wise wins on the held-out selection set.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blame::{
    assign_blame, extract_diagnostics, select_blame_episode, BlameError, Blamer,
};
use crate::env::{Environment, EnvironmentError, SuiteError, TaskInstance, TaskSuite};
use crate::gateway::CassetteMode;
use crate::mutation::{build_child, generate_feedback, MutationError, Mutator};
use crate::policy::{ModuleKind, PolicyError, PolicyGenome};
use crate::rollout::{evaluate_batch, EpisodeRecord, RolloutError, StageRuntime};

/// A candidate genome plus its selection statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationEntry {
    pub genome: PolicyGenome,
    pub win_frequency: f64,
    pub selection_scores: BTreeMap<String, f64>,
}

impl PopulationEntry {
    pub fn selection_mean(&self) -> f64 {
        if self.selection_scores.is_empty() {
            return 0.0;
        }
        self.selection_scores.values().sum::<f64>() / self.selection_scores.len() as f64
    }
}

/// One generation of the loop, as written to the history log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: u32,
    pub parent_id: String,
    pub minibatch_task_ids: Vec<String>,
    pub parent_mean: f64,
    pub child_id: Option<String>,
    pub child_mean: Option<f64>,
    pub blame_target: Option<ModuleKind>,
    pub accepted: bool,
    pub population_ids_after: Vec<String>,
    pub win_frequencies_after: BTreeMap<String, f64>,
    pub best_selection_mean: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Scripted,
    Model,
}

/// How the population is pruned after each generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    /// Instance-wise winners survive; win frequency drives parent sampling.
    DiversityAware,
    /// Only the global best by mean selection reward survives (ablation).
    GreedyBest,
}

/// Run configuration. Every field has a default so an empty config file
/// resolves to the stock budget (8 generations, mini-batches of 3).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub max_generations: u32,
    pub minibatch_size: usize,
    pub rng_seed: u64,
    pub backend: Backend,
    pub model_id: String,
    pub blamer_model_id: Option<String>,
    pub mutator_model_id: Option<String>,
    pub task_suite: PathBuf,
    pub tool_suite: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub cassette: Option<PathBuf>,
    pub cassette_mode: CassetteMode,
    pub max_steps: usize,
    pub temperature: f64,
    pub max_output_chars: usize,
    pub selection_rule: SelectionRule,
    pub seed_specs: Option<BTreeMap<ModuleKind, String>>,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            max_generations: 8,
            minibatch_size: 3,
            rng_seed: 0,
            backend: Backend::Scripted,
            model_id: String::new(),
            blamer_model_id: None,
            mutator_model_id: None,
            task_suite: PathBuf::from("tasks.json"),
            tool_suite: None,
            out_dir: PathBuf::from("runs"),
            cassette: None,
            cassette_mode: CassetteMode::Replay,
            max_steps: 25,
            temperature: 0.0,
            max_output_chars: 16_000,
            selection_rule: SelectionRule::DiversityAware,
            seed_specs: None,
        }
    }
}

impl RunConfig {
    /// The seed genome this run starts from.
    pub fn seed_genome(&self) -> Result<PolicyGenome, PolicyError> {
        match &self.seed_specs {
            Some(texts) => PolicyGenome::new_seed(texts),
            None => Ok(crate::prompts::default_seed_genome()),
        }
    }

    pub fn validate(&self, suite: &TaskSuite) -> Result<(), EngineError> {
        if self.minibatch_size == 0 {
            return Err(EngineError::Config(
                "minibatch_size must be positive".to_string(),
            ));
        }
        if self.minibatch_size > suite.train.len() {
            return Err(EngineError::Config(format!(
                "minibatch_size {} exceeds the {} training tasks",
                self.minibatch_size,
                suite.train.len()
            )));
        }
        if self.temperature < 0.0 {
            return Err(EngineError::Config("temperature must be >= 0".to_string()));
        }
        if self.backend == Backend::Model && self.model_id.is_empty() {
            return Err(EngineError::Config(
                "model backend requires model_id".to_string(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("EmptyPopulation: cannot sample a parent")]
    EmptyPopulation,
    #[error("UnnormalizedWeights: win frequencies sum to {0}, expected 1")]
    UnnormalizedWeights(f64),
    #[error("EmptySelectionSet: selection requires at least one task")]
    EmptySelectionSet,
    #[error("IncompleteScores: {genome_id} lacks a score for task {task_id}")]
    IncompleteScores { genome_id: String, task_id: String },
    #[error("ConfigError: {0}")]
    Config(String),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Blame(#[from] BlameError),
    #[error(transparent)]
    Mutation(MutationError),
    #[error(transparent)]
    Policy(PolicyError),
    #[error(transparent)]
    Suite(#[from] SuiteError),
    #[error(transparent)]
    Environment(#[from] EnvironmentError),
    #[error("IoError: {0}")]
    Io(#[from] std::io::Error),
}

/// One episode as appended to the episodes log: the record itself plus the
/// generation and loop phase that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLogLine {
    pub generation: u32,
    pub role: EpisodeRole,
    pub task_id: String,
    pub genome_id: String,
    pub reward: f64,
    pub final_answer: String,
    pub steps: Vec<crate::rollout::Step>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpisodeRole {
    Parent,
    Child,
    Selection,
}

impl EpisodeLogLine {
    pub fn new(generation: u32, role: EpisodeRole, episode: EpisodeRecord) -> EpisodeLogLine {
        EpisodeLogLine {
            generation,
            role,
            task_id: episode.task_id,
            genome_id: episode.genome_id,
            reward: episode.reward,
            final_answer: episode.final_answer,
            steps: episode.trajectory.steps,
        }
    }
}

/// Streaming receiver for run artifacts. History and episodes are appended
/// as they are produced, so an aborted run still persists its prefix.
pub trait RunSink {
    fn episode(&mut self, line: &EpisodeLogLine) -> std::io::Result<()>;
    fn generation(&mut self, record: &GenerationRecord) -> std::io::Result<()>;
}

/// Sink that drops everything.
#[derive(Debug, Default)]
pub struct NullSink;

impl RunSink for NullSink {
    fn episode(&mut self, _line: &EpisodeLogLine) -> std::io::Result<()> {
        Ok(())
    }
    fn generation(&mut self, _record: &GenerationRecord) -> std::io::Result<()> {
        Ok(())
    }
}

/// Sink that collects everything in memory.
#[derive(Debug, Default)]
pub struct MemorySink {
    pub episodes: Vec<EpisodeLogLine>,
    pub history: Vec<GenerationRecord>,
}

impl RunSink for MemorySink {
    fn episode(&mut self, line: &EpisodeLogLine) -> std::io::Result<()> {
        self.episodes.push(line.clone());
        Ok(())
    }
    fn generation(&mut self, record: &GenerationRecord) -> std::io::Result<()> {
        self.history.push(record.clone());
        Ok(())
    }
}

/// Everything a finished run returns.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub best: PolicyGenome,
    pub history: Vec<GenerationRecord>,
    pub population: Vec<PopulationEntry>,
    /// Every genome the run created in creation order, rejected children
    /// included: the lineage log.
    pub genomes: Vec<PolicyGenome>,
}

/// Strict-improvement acceptance gate: equality is rejected.
pub fn accept_child(parent_mean: f64, child_mean: f64) -> bool {
    child_mean > parent_mean
}

/// Categorical draw proportional to win frequency, via inverse CDF over the
/// entries in creation order.
pub fn sample_parent<'a>(
    population: &'a [PopulationEntry],
    rng: &mut ChaCha12Rng,
) -> Result<&'a PolicyGenome, EngineError> {
    let index = sample_parent_index(population, rng)?;
    Ok(&population[index].genome)
}

fn sample_parent_index(
    population: &[PopulationEntry],
    rng: &mut ChaCha12Rng,
) -> Result<usize, EngineError> {
    if population.is_empty() {
        return Err(EngineError::EmptyPopulation);
    }
    let total: f64 = population.iter().map(|e| e.win_frequency).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(EngineError::UnnormalizedWeights(total));
    }
    let draw: f64 = rng.gen();
    let mut cumulative = 0.0;
    let mut fallback = 0usize;
    for (i, entry) in population.iter().enumerate() {
        if entry.win_frequency > 0.0 {
            fallback = i;
        }
        cumulative += entry.win_frequency;
        if draw < cumulative {
            return Ok(i);
        }
    }
    // Float round-off left the draw above the last cumulative bound.
    Ok(fallback)
}

/// Instance-wise winner selection.
///
/// Per selection task the winner is the entry with maximal reward, ties
/// resolved toward the earliest-created entry. Entries that win no task
/// are pruned; win frequency is wins divided by the selection-set size.
pub fn select_population(
    population: &[PopulationEntry],
    selection_tasks: &[TaskInstance],
) -> Result<(Vec<PopulationEntry>, BTreeMap<String, f64>), EngineError> {
    if population.is_empty() {
        return Err(EngineError::EmptyPopulation);
    }
    if selection_tasks.is_empty() {
        return Err(EngineError::EmptySelectionSet);
    }
    let mut wins: Vec<usize> = vec![0; population.len()];
    for task in selection_tasks {
        let mut winner = 0usize;
        let mut best = f64::NEG_INFINITY;
        for (i, entry) in population.iter().enumerate() {
            let score = *entry.selection_scores.get(&task.id).ok_or_else(|| {
                EngineError::IncompleteScores {
                    genome_id: entry.genome.id.clone(),
                    task_id: task.id.clone(),
                }
            })?;
            if score > best {
                best = score;
                winner = i;
            }
        }
        wins[winner] += 1;
    }
    let mut retained = Vec::new();
    let mut frequencies = BTreeMap::new();
    for (entry, &count) in population.iter().zip(wins.iter()) {
        if count > 0 {
            let mut kept = entry.clone();
            kept.win_frequency = count as f64 / selection_tasks.len() as f64;
            frequencies.insert(kept.genome.id.clone(), kept.win_frequency);
            retained.push(kept);
        }
    }
    Ok((retained, frequencies))
}

/// Greedy ablation rule: keep only the entry with the best mean selection
/// reward (earliest creation on ties) and give it the full sampling mass.
pub fn select_population_greedy(
    population: &[PopulationEntry],
    selection_tasks: &[TaskInstance],
) -> Result<(Vec<PopulationEntry>, BTreeMap<String, f64>), EngineError> {
    if population.is_empty() {
        return Err(EngineError::EmptyPopulation);
    }
    if selection_tasks.is_empty() {
        return Err(EngineError::EmptySelectionSet);
    }
    let mut best_index = 0usize;
    let mut best_mean = f64::NEG_INFINITY;
    for (i, entry) in population.iter().enumerate() {
        let mean = entry.selection_mean();
        if mean > best_mean {
            best_mean = mean;
            best_index = i;
        }
    }
    let mut kept = population[best_index].clone();
    kept.win_frequency = 1.0;
    let frequencies = BTreeMap::from([(kept.genome.id.clone(), 1.0)]);
    Ok((vec![kept], frequencies))
}

struct EvolutionEngine<'a> {
    config: &'a RunConfig,
    suite: &'a TaskSuite,
    env: &'a dyn Environment,
    runtime: &'a dyn StageRuntime,
    blamer: &'a mut dyn Blamer,
    mutator: &'a mut dyn Mutator,
    rng: ChaCha12Rng,
    population: Vec<PopulationEntry>,
    // (genome fingerprint, task id) -> cached selection reward.
    score_cache: BTreeMap<(String, String), f64>,
    history: Vec<GenerationRecord>,
    archive: Vec<PolicyGenome>,
}

/// Outcome of the mutation phase of one generation.
enum MutationPhase {
    Child {
        child: PolicyGenome,
        child_mean: f64,
        episodes: Vec<EpisodeRecord>,
    },
    /// Recoverable mutation failure; the generation is recorded and the
    /// loop proceeds.
    Skipped(String),
}

impl<'a> EvolutionEngine<'a> {
    fn new(
        config: &'a RunConfig,
        suite: &'a TaskSuite,
        env: &'a dyn Environment,
        runtime: &'a dyn StageRuntime,
        blamer: &'a mut dyn Blamer,
        mutator: &'a mut dyn Mutator,
    ) -> Result<EvolutionEngine<'a>, EngineError> {
        use rand::SeedableRng;
        config.validate(suite)?;
        let seed = config.seed_genome().map_err(EngineError::Policy)?;
        let archive = vec![seed.clone()];
        let population = vec![PopulationEntry {
            genome: seed,
            win_frequency: 1.0,
            selection_scores: BTreeMap::new(),
        }];
        Ok(EvolutionEngine {
            config,
            suite,
            env,
            runtime,
            blamer,
            mutator,
            rng: ChaCha12Rng::seed_from_u64(config.rng_seed),
            population,
            score_cache: BTreeMap::new(),
            history: Vec::new(),
            archive,
        })
    }

    fn run(&mut self, sink: &mut dyn RunSink) -> Result<RunOutcome, EngineError> {
        // Initial selection pass so generation-0 win frequencies are
        // well-defined and the zero-budget run still has a scored best.
        self.refresh_selection_scores(0, sink)?;
        self.apply_selection()?;

        for generation in 1..=self.config.max_generations {
            self.run_generation(generation, sink)?;
        }

        let best = self
            .best_entry()
            .ok_or(EngineError::EmptyPopulation)?
            .genome
            .clone();
        Ok(RunOutcome {
            best,
            history: self.history.clone(),
            population: self.population.clone(),
            genomes: self.archive.clone(),
        })
    }

    fn run_generation(
        &mut self,
        generation: u32,
        sink: &mut dyn RunSink,
    ) -> Result<(), EngineError> {
        // Phase 1: trajectory collection.
        let parent_index = sample_parent_index(&self.population, &mut self.rng)?;
        let parent = self.population[parent_index].genome.clone();
        let batch = self.sample_minibatch();
        let batch_refs: Vec<&TaskInstance> = batch.to_vec();
        let (parent_mean, parent_episodes) =
            evaluate_batch(&parent, &batch_refs, self.env, self.runtime)?;
        for episode in &parent_episodes {
            sink.episode(&EpisodeLogLine::new(
                generation,
                EpisodeRole::Parent,
                episode.clone(),
            ))?;
        }
        let minibatch_task_ids: Vec<String> =
            batch.iter().map(|t| t.id.clone()).collect();

        // Phases 2 and 3: blame and targeted mutation.
        let mut blame_target = None;
        let mut blame_note = None;
        let phase = match select_blame_episode(&parent_episodes)? {
            None => MutationPhase::Skipped(
                "all mini-batch rewards perfect; mutation skipped".to_string(),
            ),
            Some(episode) => {
                let diagnostics = extract_diagnostics(&episode.trajectory)?;
                let report = assign_blame(episode, &diagnostics, self.blamer)?;
                blame_target = Some(report.target);
                if report.diagnosis.contains("[fallback") {
                    blame_note =
                        Some("blamer output unparseable; heuristic fallback target used".to_string());
                }
                match generate_feedback(
                    episode,
                    report.target,
                    &parent,
                    &diagnostics,
                    &report,
                    self.mutator,
                ) {
                    Ok(proposal) => match build_child(&parent, &proposal, generation) {
                        Ok(child) => {
                            let (child_mean, episodes) =
                                evaluate_batch(&child, &batch_refs, self.env, self.runtime)?;
                            self.archive.push(child.clone());
                            MutationPhase::Child {
                                child,
                                child_mean,
                                episodes,
                            }
                        }
                        Err(err @ (PolicyError::NoOpEdit(_) | PolicyError::EmptySpec(_))) => {
                            MutationPhase::Skipped(err.to_string())
                        }
                        Err(err) => return Err(EngineError::Policy(err)),
                    },
                    // Quality failures of the mutation itself abandon the
                    // generation; infrastructure failures abort the run.
                    Err(
                        err @ (MutationError::NoMissingTag { .. }
                        | MutationError::OutputUnparseable(_)),
                    ) => MutationPhase::Skipped(err.to_string()),
                    Err(err) => return Err(EngineError::Mutation(err)),
                }
            }
        };

        let (child_id, child_mean, accepted, mut note) = match phase {
            MutationPhase::Skipped(reason) => (None, None, false, Some(reason)),
            MutationPhase::Child {
                child,
                child_mean,
                episodes,
            } => {
                for episode in &episodes {
                    sink.episode(&EpisodeLogLine::new(
                        generation,
                        EpisodeRole::Child,
                        episode.clone(),
                    ))?;
                }
                let accepted = accept_child(parent_mean, child_mean);
                let child_id = child.id.clone();
                if accepted {
                    self.population.push(PopulationEntry {
                        genome: child,
                        win_frequency: 0.0,
                        selection_scores: BTreeMap::new(),
                    });
                }
                (Some(child_id), Some(child_mean), accepted, None)
            }
        };
        if let Some(extra) = blame_note {
            note = Some(match note {
                Some(existing) => format!("{existing}; {extra}"),
                None => extra,
            });
        }

        // Phase 4: diversity-aware population selection on the held-out set.
        self.refresh_selection_scores(generation, sink)?;
        self.apply_selection()?;

        let record = GenerationRecord {
            generation,
            parent_id: parent.id.clone(),
            minibatch_task_ids,
            parent_mean,
            child_id,
            child_mean,
            blame_target,
            accepted,
            population_ids_after: self
                .population
                .iter()
                .map(|e| e.genome.id.clone())
                .collect(),
            win_frequencies_after: self
                .population
                .iter()
                .map(|e| (e.genome.id.clone(), e.win_frequency))
                .collect(),
            best_selection_mean: self
                .best_entry()
                .map(|e| e.selection_mean())
                .unwrap_or(0.0),
            note,
        };
        debug_assert!(!record.accepted || record.child_mean > Some(record.parent_mean));
        sink.generation(&record)?;
        self.history.push(record);
        Ok(())
    }

    /// Draws the generation's mini-batch uniformly without replacement.
    fn sample_minibatch(&mut self) -> Vec<&'a TaskInstance> {
        let indices = rand::seq::index::sample(
            &mut self.rng,
            self.suite.train.len(),
            self.config.minibatch_size,
        );
        indices.iter().map(|i| &self.suite.train[i]).collect()
    }

    /// Fills every entry's selection scores, reusing cached rewards for
    /// fingerprints already evaluated. Fresh rollouts are logged.
    fn refresh_selection_scores(
        &mut self,
        generation: u32,
        sink: &mut dyn RunSink,
    ) -> Result<(), EngineError> {
        for entry in self.population.iter_mut() {
            let fingerprint = entry.genome.fingerprint();
            for task in &self.suite.selection {
                if entry.selection_scores.contains_key(&task.id) {
                    continue;
                }
                let key = (fingerprint.clone(), task.id.clone());
                let reward = match self.score_cache.get(&key) {
                    Some(reward) => *reward,
                    None => {
                        let episode =
                            crate::rollout::execute_episode(&entry.genome, task, self.env, self.runtime);
                        let reward = episode.reward;
                        sink.episode(&EpisodeLogLine::new(
                            generation,
                            EpisodeRole::Selection,
                            episode,
                        ))?;
                        self.score_cache.insert(key, reward);
                        reward
                    }
                };
                entry.selection_scores.insert(task.id.clone(), reward);
            }
        }
        Ok(())
    }

    fn apply_selection(&mut self) -> Result<(), EngineError> {
        let (retained, _frequencies) = match self.config.selection_rule {
            SelectionRule::DiversityAware => {
                select_population(&self.population, &self.suite.selection)?
            }
            SelectionRule::GreedyBest => {
                select_population_greedy(&self.population, &self.suite.selection)?
            }
        };
        self.population = retained;
        Ok(())
    }

    /// Highest mean selection reward, ties toward the earliest creation.
    fn best_entry(&self) -> Option<&PopulationEntry> {
        let mut best: Option<&PopulationEntry> = None;
        for entry in &self.population {
            match best {
                Some(current) if entry.selection_mean() <= current.selection_mean() => {}
                _ => best = Some(entry),
            }
        }
        best
    }
}

/// Runs the full loop: Phases 1-4 for each generation, returning the
/// candidate with the best mean selection reward plus the whole history.
pub fn run_generations(
    config: &RunConfig,
    suite: &TaskSuite,
    env: &dyn Environment,
    runtime: &dyn StageRuntime,
    blamer: &mut dyn Blamer,
    mutator: &mut dyn Mutator,
    sink: &mut dyn RunSink,
) -> Result<RunOutcome, EngineError> {
    EvolutionEngine::new(config, suite, env, runtime, blamer, mutator)?.run(sink)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn entry(id_hint: &str, win: f64, scores: &[(&str, f64)]) -> PopulationEntry {
        let texts = BTreeMap::from([
            (ModuleKind::Planner, format!("p {id_hint}")),
            (ModuleKind::Selector, "s".to_string()),
            (ModuleKind::Caller, "c".to_string()),
            (ModuleKind::Synthesizer, "y".to_string()),
        ]);
        PopulationEntry {
            genome: PolicyGenome::new_seed(&texts).unwrap(),
            win_frequency: win,
            selection_scores: scores
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect(),
        }
    }

    fn selection_tasks(ids: &[&str]) -> Vec<TaskInstance> {
        ids.iter()
            .map(|id| TaskInstance {
                id: id.to_string(),
                instruction: "i".to_string(),
                num_subgoals: 1,
                gold_answer: "g".to_string(),
                required_skills: vec![],
            })
            .collect()
    }

    #[test]
    fn accept_child_is_strict() {
        assert!(accept_child(0.5, 0.75));
        assert!(!accept_child(0.5, 0.5));
        assert!(!accept_child(1.0, 1.0));
    }

    #[test]
    fn single_entry_population_always_sampled() {
        let population = vec![entry("a", 1.0, &[])];
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        for _ in 0..32 {
            let g = sample_parent(&population, &mut rng).unwrap();
            assert_eq!(g.id, population[0].genome.id);
        }
    }

    #[test]
    fn even_weights_draw_evenly() {
        let population = vec![entry("a", 0.5, &[]), entry("b", 0.5, &[])];
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut counts = [0usize; 2];
        for _ in 0..10_000 {
            let index = sample_parent_index(&population, &mut rng).unwrap();
            counts[index] += 1;
        }
        assert!(
            counts[0].abs_diff(5_000) <= 200,
            "expected 5000 +- 200, got {counts:?}"
        );
    }

    #[test]
    fn zero_mass_never_sampled() {
        let population = vec![entry("a", 1.0, &[]), entry("b", 0.0, &[])];
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        for _ in 0..10_000 {
            assert_eq!(sample_parent_index(&population, &mut rng).unwrap(), 0);
        }
    }

    #[test]
    fn unnormalized_weights_rejected() {
        let population = vec![entry("a", 0.7, &[]), entry("b", 0.7, &[])];
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        assert!(matches!(
            sample_parent(&population, &mut rng),
            Err(EngineError::UnnormalizedWeights(_))
        ));
    }

    #[test]
    fn empty_population_rejected() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        assert!(matches!(
            sample_parent(&[], &mut rng),
            Err(EngineError::EmptyPopulation)
        ));
    }

    #[test]
    fn worked_selection_example_splits_wins_evenly() {
        let tasks = selection_tasks(&["x1", "x2", "x3", "x4"]);
        let a = entry(
            "a",
            1.0,
            &[("x1", 1.0), ("x2", 0.5), ("x3", 1.0), ("x4", 0.0)],
        );
        let b = entry(
            "b",
            0.0,
            &[("x1", 0.5), ("x2", 1.0), ("x3", 1.0), ("x4", 1.0)],
        );
        let (retained, frequencies) = select_population(&[a, b], &tasks).unwrap();
        assert_eq!(retained.len(), 2);
        assert_eq!(frequencies.len(), 2);
        for w in frequencies.values() {
            assert_eq!(*w, 0.5);
        }
        let total: f64 = frequencies.values().sum();
        assert!((total - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn dominated_candidate_pruned() {
        let tasks = selection_tasks(&["x1", "x2"]);
        let a = entry("a", 1.0, &[("x1", 1.0), ("x2", 1.0)]);
        let b = entry("b", 0.0, &[("x1", 0.5), ("x2", 0.5)]);
        let b_id = b.genome.id.clone();
        let (retained, frequencies) = select_population(&[a, b], &tasks).unwrap();
        assert_eq!(retained.len(), 1);
        assert!(!frequencies.contains_key(&b_id));
        assert_eq!(retained[0].win_frequency, 1.0);
    }

    #[test]
    fn single_candidate_retained_regardless_of_scores() {
        let tasks = selection_tasks(&["x1", "x2"]);
        let a = entry("a", 1.0, &[("x1", 0.0), ("x2", 0.0)]);
        let (retained, frequencies) = select_population(&[a], &tasks).unwrap();
        assert_eq!(retained.len(), 1);
        assert_eq!(retained[0].win_frequency, 1.0);
        assert_eq!(frequencies.len(), 1);
    }

    #[test]
    fn incomplete_scores_rejected() {
        let tasks = selection_tasks(&["x1", "x2"]);
        let a = entry("a", 1.0, &[("x1", 1.0)]);
        assert!(matches!(
            select_population(&[a], &tasks),
            Err(EngineError::IncompleteScores { .. })
        ));
    }

    #[test]
    fn greedy_keeps_only_global_best() {
        let tasks = selection_tasks(&["x1", "x2"]);
        let a = entry("a", 0.5, &[("x1", 1.0), ("x2", 0.0)]);
        let b = entry("b", 0.5, &[("x1", 0.0), ("x2", 1.0)]);
        let c = entry("c", 0.0, &[("x1", 0.75), ("x2", 0.75)]);
        let c_id = c.genome.id.clone();
        let (retained, frequencies) =
            select_population_greedy(&[a, b, c], &tasks).unwrap();
        assert_eq!(retained.len(), 1);
        assert_eq!(retained[0].genome.id, c_id);
        assert_eq!(frequencies[&c_id], 1.0);
    }

    #[test]
    fn defaults_match_stock_budget() {
        let config: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(config.max_generations, 8);
        assert_eq!(config.minibatch_size, 3);
        assert_eq!(config, RunConfig::default());
    }
}
