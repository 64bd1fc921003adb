//! Run artifacts: append-only JSONL logs, population snapshots, and the
//! CSV emissions (learning curve, module-level error progression).
//!
//! Logs are never rewritten in place; each run writes into a fresh run-id
//! directory. Readers tolerate a partially written trailing line.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blame::{extract_diagnostics, Verdict};
use crate::engine::{EpisodeLogLine, EpisodeRole, GenerationRecord, PopulationEntry, RunSink};
use crate::policy::ModuleKind;
use crate::rollout::Trajectory;

pub const SNAPSHOT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("IoError: {0}")]
    Io(#[from] std::io::Error),
    #[error("ParseError: {0}")]
    Parse(String),
    #[error("SchemaVersionMismatch: snapshot is version {found}, expected {expected}")]
    SchemaVersionMismatch { found: u32, expected: u32 },
    #[error("IncompleteLogs: {0}")]
    IncompleteLogs(String),
}

/// Population snapshot: the full selection state at one generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub schema_version: u32,
    pub generation: u32,
    pub entries: Vec<PopulationEntry>,
}

pub fn save_snapshot(
    population: &[PopulationEntry],
    generation: u32,
    path: &Path,
) -> Result<(), PersistError> {
    let snapshot = Snapshot {
        schema_version: SNAPSHOT_SCHEMA_VERSION,
        generation,
        entries: population.to_vec(),
    };
    let mut file = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut file, &snapshot)
        .map_err(|e| PersistError::Parse(e.to_string()))?;
    file.write_all(b"\n")?;
    file.flush()?;
    Ok(())
}

pub fn load_snapshot(path: &Path) -> Result<Snapshot, PersistError> {
    let raw = std::fs::read_to_string(path)?;
    // Peek at the version before binding the full schema.
    let value: serde_json::Value =
        serde_json::from_str(&raw).map_err(|e| PersistError::Parse(e.to_string()))?;
    let found = value
        .get("schema_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| PersistError::Parse("snapshot lacks schema_version".to_string()))?
        as u32;
    if found != SNAPSHOT_SCHEMA_VERSION {
        return Err(PersistError::SchemaVersionMismatch {
            found,
            expected: SNAPSHOT_SCHEMA_VERSION,
        });
    }
    serde_json::from_value(value).map_err(|e| PersistError::Parse(e.to_string()))
}

/// Streams history and episode lines into `history.jsonl` and
/// `episodes.jsonl` inside a run directory.
pub struct RunDirSink {
    history: BufWriter<File>,
    episodes: BufWriter<File>,
}

impl RunDirSink {
    pub fn create(run_dir: &Path) -> Result<RunDirSink, PersistError> {
        let open = |name: &str| -> Result<BufWriter<File>, PersistError> {
            Ok(BufWriter::new(
                OpenOptions::new()
                    .create_new(true)
                    .append(true)
                    .open(run_dir.join(name))?,
            ))
        };
        Ok(RunDirSink {
            history: open("history.jsonl")?,
            episodes: open("episodes.jsonl")?,
        })
    }
}

impl RunSink for RunDirSink {
    fn episode(&mut self, line: &EpisodeLogLine) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.episodes, line)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        self.episodes.write_all(b"\n")?;
        self.episodes.flush()
    }

    fn generation(&mut self, record: &GenerationRecord) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.history, record)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        self.history.write_all(b"\n")?;
        self.history.flush()
    }
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, PersistError> {
    let raw = std::fs::read_to_string(path)?;
    let lines: Vec<&str> = raw.lines().filter(|l| !l.trim().is_empty()).collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        match serde_json::from_str::<T>(line) {
            Ok(value) => out.push(value),
            // A torn trailing line is ignored; corruption elsewhere is not.
            Err(_) if i + 1 == lines.len() => break,
            Err(e) => {
                return Err(PersistError::Parse(format!("line {}: {e}", i + 1)));
            }
        }
    }
    Ok(out)
}

pub fn read_history(path: &Path) -> Result<Vec<GenerationRecord>, PersistError> {
    read_jsonl(path)
}

pub fn read_episodes(path: &Path) -> Result<Vec<EpisodeLogLine>, PersistError> {
    read_jsonl(path)
}

/// One learning-curve sample per generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningCurvePoint {
    pub generation: u32,
    pub best_selection_mean: f64,
    pub population_size: usize,
    pub blamed_module: Option<ModuleKind>,
}

pub fn learning_curve(history: &[GenerationRecord]) -> Vec<LearningCurvePoint> {
    history
        .iter()
        .map(|record| LearningCurvePoint {
            generation: record.generation,
            best_selection_mean: record.best_selection_mean,
            population_size: record.population_ids_after.len(),
            blamed_module: record.blame_target,
        })
        .collect()
}

pub fn write_curve_csv<W: Write>(
    points: &[LearningCurvePoint],
    mut writer: W,
) -> Result<(), PersistError> {
    writeln!(
        writer,
        "generation,best_selection_mean,population_size,blamed_module"
    )?;
    for point in points {
        writeln!(
            writer,
            "{},{},{},{}",
            point.generation,
            point.best_selection_mean,
            point.population_size,
            point.blamed_module.map(|m| m.name()).unwrap_or("")
        )?;
    }
    Ok(())
}

/// Module-level error percentages for one generation's mini-batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorProgressionRow {
    pub generation: u32,
    pub planner_pct: f64,
    pub selector_pct: f64,
    pub caller_pct: f64,
    pub synthesizer_pct: f64,
    pub total_pct: f64,
}

/// Attributes each failing mini-batch episode to the module of its first
/// failure event and reports per-module and overall failure percentages.
pub fn error_progression(
    history: &[GenerationRecord],
    episodes: &[EpisodeLogLine],
) -> Result<Vec<ErrorProgressionRow>, PersistError> {
    let mut rows = Vec::with_capacity(history.len());
    for record in history {
        let batch: Vec<&EpisodeLogLine> = episodes
            .iter()
            .filter(|e| e.generation == record.generation && e.role == EpisodeRole::Parent)
            .collect();
        if batch.is_empty() {
            return Err(PersistError::IncompleteLogs(format!(
                "no mini-batch episodes logged for generation {}",
                record.generation
            )));
        }
        let mut failures: BTreeMap<ModuleKind, usize> = BTreeMap::new();
        let mut failing = 0usize;
        for episode in &batch {
            if episode.reward >= 1.0 {
                continue;
            }
            failing += 1;
            let trajectory = Trajectory {
                steps: episode.steps.clone(),
            };
            let events = extract_diagnostics(&trajectory)
                .map_err(|e| PersistError::IncompleteLogs(e.to_string()))?;
            if let Some(first_fail) = events.iter().find(|e| e.verdict == Verdict::Fail) {
                *failures.entry(first_fail.module).or_insert(0) += 1;
            }
        }
        let pct = |module: ModuleKind| -> f64 {
            100.0 * failures.get(&module).copied().unwrap_or(0) as f64 / batch.len() as f64
        };
        rows.push(ErrorProgressionRow {
            generation: record.generation,
            planner_pct: pct(ModuleKind::Planner),
            selector_pct: pct(ModuleKind::Selector),
            caller_pct: pct(ModuleKind::Caller),
            synthesizer_pct: pct(ModuleKind::Synthesizer),
            total_pct: 100.0 * failing as f64 / batch.len() as f64,
        });
    }
    Ok(rows)
}

pub fn write_error_progression_csv<W: Write>(
    rows: &[ErrorProgressionRow],
    mut writer: W,
) -> Result<(), PersistError> {
    writeln!(
        writer,
        "generation,planner_pct,selector_pct,caller_pct,synthesizer_pct,total_pct"
    )?;
    for row in rows {
        writeln!(
            writer,
            "{},{},{},{},{},{}",
            row.generation,
            row.planner_pct,
            row.selector_pct,
            row.caller_pct,
            row.synthesizer_pct,
            row.total_pct
        )?;
    }
    Ok(())
}
