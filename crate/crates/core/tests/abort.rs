//! Aborted runs persist the history prefix they produced.

use evoloop::engine::{Backend, RunConfig};
use evoloop::gateway::CassetteMode;
use evoloop::runner::{execute_run_with_transport, RunnerError};
use evoloop::testkit::{convergence_suite, ScriptedModelTransport};

#[test]
fn cassette_miss_aborts_with_partial_history_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let suite_path = dir.path().join("tasks.json");
    std::fs::write(
        &suite_path,
        serde_json::to_string_pretty(&convergence_suite()).unwrap(),
    )
    .unwrap();

    let record_config = RunConfig {
        max_generations: 8,
        rng_seed: 0,
        backend: Backend::Model,
        model_id: "stub-model".to_string(),
        task_suite: suite_path.clone(),
        out_dir: dir.path().join("record"),
        cassette_mode: CassetteMode::Record,
        ..RunConfig::default()
    };
    let recorded = execute_run_with_transport(&record_config, &ScriptedModelTransport).unwrap();
    let full_history =
        evoloop::persist::read_history(&recorded.run_dir.join("history.jsonl")).unwrap();
    assert_eq!(full_history.len(), 8);

    // Drop the tail of the cassette so replay starves mid-run.
    let cassette_path = recorded.run_dir.join("cassette.jsonl");
    let full = std::fs::read_to_string(&cassette_path).unwrap();
    let lines: Vec<&str> = full.lines().collect();
    let truncated_path = dir.path().join("truncated.jsonl");
    std::fs::write(&truncated_path, lines[..lines.len() / 2].join("\n")).unwrap();

    let replay_config = RunConfig {
        cassette: Some(truncated_path),
        cassette_mode: CassetteMode::Replay,
        out_dir: dir.path().join("replay"),
        ..record_config
    };
    let err = execute_run_with_transport(&replay_config, &evoloop::gateway::NullTransport)
        .expect_err("starved replay must abort");
    assert!(
        matches!(&err, RunnerError::Engine(_)) && err.to_string().contains("CassetteMiss"),
        "unexpected error: {err}"
    );

    // The aborted run still wrote every generation it completed.
    let failed_run_dir = std::fs::read_dir(dir.path().join("replay"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let partial =
        evoloop::persist::read_history(&failed_run_dir.join("history.jsonl")).unwrap();
    assert!(!partial.is_empty(), "no history persisted before the abort");
    assert!(
        partial.len() < full_history.len(),
        "the truncated cassette should not cover the whole run"
    );
    // No snapshot: the run did not finish.
    assert!(!failed_run_dir.join("snapshot.json").exists());
}
