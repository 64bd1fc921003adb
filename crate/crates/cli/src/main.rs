//! Command-line entry points for the evoloop optimizer.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use evoloop::engine::{Backend, EpisodeLogLine, RunConfig};
use evoloop::env::ScriptedEnvironment;
use evoloop::gateway::CassetteMode;
use evoloop::persist;
use evoloop::rollout::{EpisodeRecord, ScriptedRuntime, Trajectory};
use evoloop::runner::execute_run;

#[derive(Parser)]
#[command(
    name = "evoloop",
    about = "Evolves a four-module tool-use policy by blame-targeted mutation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the evolution loop from a config file.
    Evolve(EvolveArgs),
    /// Re-run a recorded model-backed configuration strictly from its cassette.
    Replay(EvolveArgs),
    /// Score the genomes of a snapshot on a task suite split.
    Eval(EvalArgs),
    /// Attribute blame for one stored episode.
    Blame(BlameArgs),
    /// Emit learning-curve and error-progression CSVs from run logs.
    Report(ReportArgs),
}

#[derive(Args)]
struct EvolveArgs {
    /// Run configuration (JSON). All fields optional.
    #[arg(long)]
    config: PathBuf,
    /// Override the configured RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured backend.
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    /// Override the configured cassette mode.
    #[arg(long, value_enum)]
    cassette_mode: Option<CassetteModeArg>,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Population snapshot to score.
    #[arg(long)]
    snapshot: PathBuf,
    /// Task suite file.
    #[arg(long)]
    suite: PathBuf,
    /// Which split to score against.
    #[arg(long, value_enum, default_value_t = SplitArg::Selection)]
    split: SplitArg,
    /// Restrict scoring to one genome id.
    #[arg(long)]
    genome_id: Option<String>,
}

#[derive(Args)]
struct BlameArgs {
    /// Episodes log (JSONL).
    #[arg(long)]
    episodes: PathBuf,
    /// 1-based line number of the episode to blame.
    #[arg(long, default_value_t = 1)]
    line: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory holding history.jsonl and episodes.jsonl.
    #[arg(long)]
    run: PathBuf,
    /// Where to write the CSVs (defaults to the run directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Scripted,
    Model,
}

#[derive(Clone, Copy, ValueEnum)]
enum CassetteModeArg {
    Record,
    Replay,
    Passthrough,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Selection,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Evolve(args) => evolve(args, None),
        Command::Replay(args) => evolve(args, Some(CassetteMode::Replay)),
        Command::Eval(args) => eval(args),
        Command::Blame(args) => blame(args),
        Command::Report(args) => report(args),
    }
}

fn load_config(args: &EvolveArgs) -> Result<RunConfig> {
    let raw = std::fs::read_to_string(&args.config)
        .with_context(|| format!("ConfigError: cannot read {}", args.config.display()))?;
    let mut config: RunConfig = serde_json::from_str(&raw)
        .with_context(|| format!("ConfigError: cannot parse {}", args.config.display()))?;
    if let Some(seed) = args.seed {
        config.rng_seed = seed;
    }
    if let Some(backend) = args.backend {
        config.backend = match backend {
            BackendArg::Scripted => Backend::Scripted,
            BackendArg::Model => Backend::Model,
        };
    }
    if let Some(mode) = args.cassette_mode {
        config.cassette_mode = match mode {
            CassetteModeArg::Record => CassetteMode::Record,
            CassetteModeArg::Replay => CassetteMode::Replay,
            CassetteModeArg::Passthrough => CassetteMode::Passthrough,
        };
    }
    if let Some(out) = &args.out {
        config.out_dir = out.clone();
    }
    Ok(config)
}

fn evolve(args: EvolveArgs, forced_mode: Option<CassetteMode>) -> Result<()> {
    let mut config = load_config(&args)?;
    if let Some(mode) = forced_mode {
        config.cassette_mode = mode;
        if config.backend == Backend::Model && config.cassette.is_none() {
            bail!("ConfigError: replay requires a cassette path in the config");
        }
    }
    let artifacts = execute_run(&config)?;
    let best_mean = artifacts
        .outcome
        .population
        .iter()
        .find(|e| e.genome.id == artifacts.outcome.best.id)
        .map(|e| e.selection_mean())
        .unwrap_or(0.0);
    println!("run dir: {}", artifacts.run_dir.display());
    println!(
        "best genome: {} (mean selection reward {best_mean:.4})",
        artifacts.outcome.best.id
    );
    println!(
        "population: {} candidate(s) after {} generation(s)",
        artifacts.outcome.population.len(),
        artifacts.outcome.history.len()
    );
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let snapshot = persist::load_snapshot(&args.snapshot)?;
    let suite = evoloop::load_task_suite(&args.suite)?;
    let tasks: Vec<&evoloop::TaskInstance> = match args.split {
        SplitArg::Train => suite.train.iter().collect(),
        SplitArg::Selection => suite.selection.iter().collect(),
    };
    let env = ScriptedEnvironment::with_stage_tools();
    let runtime = ScriptedRuntime;
    let mut scored = 0usize;
    for entry in &snapshot.entries {
        if let Some(wanted) = &args.genome_id {
            if &entry.genome.id != wanted {
                continue;
            }
        }
        let (mean, _) = evoloop::evaluate_batch(&entry.genome, &tasks, &env, &runtime)?;
        println!(
            "{}\tmean={mean:.4}\twin_frequency={:.4}",
            entry.genome.id, entry.win_frequency
        );
        scored += 1;
    }
    if scored == 0 {
        bail!("ConfigError: no snapshot entry matched");
    }
    Ok(())
}

fn blame(args: BlameArgs) -> Result<()> {
    let raw = std::fs::read_to_string(&args.episodes)?;
    let line = raw
        .lines()
        .filter(|l| !l.trim().is_empty())
        .nth(args.line.saturating_sub(1))
        .with_context(|| format!("ConfigError: no episode at line {}", args.line))?;
    let logged: EpisodeLogLine =
        serde_json::from_str(line).context("ParseError: episode line is not valid JSON")?;
    let episode = EpisodeRecord {
        task_id: logged.task_id,
        genome_id: logged.genome_id,
        trajectory: Trajectory {
            steps: logged.steps,
        },
        final_answer: logged.final_answer,
        reward: logged.reward,
    };
    let diagnostics = evoloop::extract_diagnostics(&episode.trajectory)?;
    let report = evoloop::assign_blame(
        &episode,
        &diagnostics,
        &mut evoloop::blame::OracleBlamer,
    )?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let history = persist::read_history(&args.run.join("history.jsonl"))?;
    let episodes = persist::read_episodes(&args.run.join("episodes.jsonl"))?;
    let out_dir = args.out.unwrap_or_else(|| args.run.clone());
    std::fs::create_dir_all(&out_dir)?;

    let curve = persist::learning_curve(&history);
    let mut curve_csv = Vec::new();
    persist::write_curve_csv(&curve, &mut curve_csv)?;
    let curve_path = out_dir.join("curves.csv");
    std::fs::write(&curve_path, curve_csv)?;

    let rows = persist::error_progression(&history, &episodes)?;
    let mut errors_csv = Vec::new();
    persist::write_error_progression_csv(&rows, &mut errors_csv)?;
    let errors_path = out_dir.join("error_progression.csv");
    std::fs::write(&errors_path, errors_csv)?;

    println!("wrote {}", curve_path.display());
    println!("wrote {}", errors_path.display());
    Ok(())
}
