//! The committed data files stay in lockstep with the in-code builders.

use std::path::Path;

use evoloop::env::Environment;

fn data_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data"))
}

#[test]
fn convergence_suite_file_matches_builder() {
    let loaded = evoloop::load_task_suite(&data_dir().join("convergence_suite.json")).unwrap();
    assert_eq!(loaded, evoloop::testkit::convergence_suite());
}

#[test]
fn clustered_suite_file_matches_builder() {
    let loaded = evoloop::load_task_suite(&data_dir().join("clustered_suite.json")).unwrap();
    assert_eq!(loaded, evoloop::testkit::clustered_suite());
}

#[test]
fn tool_suite_file_matches_builtin_tools() {
    let loaded = evoloop::env::load_tool_suite(&data_dir().join("tool_suite.json")).unwrap();
    let env = evoloop::env::ScriptedEnvironment::with_stage_tools();
    assert_eq!(loaded, env.tools().to_vec());
}
