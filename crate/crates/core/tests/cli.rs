//! The `opinion-forge` binary end to end on mock backends.

mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use opinion_forge::model::Task;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{random_split, snapshot, write_project};

fn run(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_opinion-forge"))
        .args(args)
        .arg("--config")
        .arg(config)
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn project(dir: &Path, task: Task, mock: &str) -> std::path::PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let dev = random_split(&mut rng, task, 34, "d");
    let test = random_split(&mut rng, task, 12, "t");
    write_project(dir, task, &dev, &test, &[("a", mock), ("b", mock), ("c", mock)], "")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const STAGES: [&[&str]; 7] = [
    &["prepare"],
    &["optimize"],
    &["annotate"],
    &["adjudicate"],
    &["evaluate"],
    &["agreement"],
    &["report"],
];

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let config = project(dir.path(), Task::Acos, "gold-echo");
    for args in STAGES {
        let out = run(&config, args);
        assert!(out.status.success(), "{args:?}: {}", stderr(&out));
    }
    let report = fs::read_to_string(dir.path().join("work/runs/fixture/reports/report.txt")).unwrap();
    assert!(report.contains("100.00"));
    assert!(report.contains("1.0000"));
    let selection = fs::read_to_string(dir.path().join("work/runs/fixture/a/selection.json")).unwrap();
    let selection: serde_json::Value = serde_json::from_str(&selection).unwrap();
    // every k is perfect, ties go to the smallest
    assert_eq!(selection["chosen_k"], 5);
    assert_eq!(selection["scores"].as_array().unwrap().len(), 3);
    let manifest = fs::read_to_string(dir.path().join("work/runs/fixture/a/manifest.json")).unwrap();
    assert!(manifest.contains("\"chosen_k\": 5"));
    assert!(manifest.contains("2023-11-14T22:13:20Z"));

    let majority = run(&config, &["adjudicate", "--mode", "majority"]);
    assert!(majority.status.success(), "{}", stderr(&majority));
    assert!(dir
        .path()
        .join("work/runs/fixture/adjudicator-majority/test.jsonl")
        .is_file());
}

#[test]
fn usage_and_missing_artifacts_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = project(dir.path(), Task::Aste, "gold-echo");

    let out = run(&config, &["evaluate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("missing"), "{}", stderr(&out));

    assert!(run(&config, &["prepare"]).status.success());
    assert!(run(&config, &["optimize"]).status.success());
    let out = run(&config, &["evaluate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("missing run"), "{}", stderr(&out));

    let out = run(&config, &["optimize", "--annotator", "nobody"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&config, &["adjudicate", "--mode", "vote"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&config, &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));

    fs::remove_file(dir.path().join("dev.txt")).unwrap();
    let out = run(&config, &["prepare"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("not found"), "{}", stderr(&out));
}

#[test]
fn parse_errors_name_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let config = project(dir.path(), Task::Aste, "gold-echo");
    let mut dev = fs::read_to_string(dir.path().join("dev.txt")).unwrap();
    dev.push_str("broken line without labels\n");
    fs::write(dir.path().join("dev.txt"), dev).unwrap();
    let out = run(&config, &["prepare"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("dev.txt") && err.contains("line 35"), "{err}");
}

#[test]
fn edited_run_file_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let config = project(dir.path(), Task::Aste, "gold-echo");
    for args in &STAGES[..3] {
        assert!(run(&config, args).status.success());
    }
    let run_file = dir.path().join("work/runs/fixture/b/test.jsonl");
    let text = fs::read_to_string(&run_file).unwrap().replace("positive", "negative");
    fs::write(&run_file, text).unwrap();
    let out = run(&config, &["adjudicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("integrity"), "{}", stderr(&out));
}

#[test]
fn clean_runs_produce_identical_trees() {
    let mut trees = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let config = project(dir.path(), Task::Acos, "gold-echo");
        for args in STAGES {
            assert!(run(&config, args).status.success());
        }
        trees.push(snapshot(&dir.path().join("work")));
    }
    assert!(!trees[0].is_empty());
    assert_eq!(trees[0], trees[1]);
}

#[test]
fn seed_override_changes_partition() {
    let dir = tempfile::tempdir().unwrap();
    let config = project(dir.path(), Task::Aste, "gold-echo");
    let partition = dir.path().join("work/runs/fixture/partition.json");
    assert!(run(&config, &["prepare"]).status.success());
    let first = fs::read(&partition).unwrap();
    assert!(run(&config, &["prepare"]).status.success());
    assert_eq!(fs::read(&partition).unwrap(), first);
    assert!(run(&config, &["prepare", "--seed", "99"]).status.success());
    assert_ne!(fs::read(&partition).unwrap(), first);
    // the config seed no longer matches the partition
    let out = run(&config, &["optimize"]);
    assert_eq!(out.status.code(), Some(1));
}
