//! Stage-contract tests for the CLI pipeline: dependency errors name the
//! stage to run, stale artifacts are detected, and unchanged reruns are
//! byte-identical cache hits.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use ds2::corpus::save_corpus;
use ds2::pipeline::{Pipeline, PipelineConfig, Stage};
use ds2::synthlab::toy_corpus;

fn stub_config(dir: &Path, n: usize) -> PipelineConfig {
    let corpus_path = dir.join("corpus.jsonl");
    save_corpus(&toy_corpus(n, 3), &corpus_path).expect("save corpus");
    let mut config = PipelineConfig {
        seed: 7,
        ..Default::default()
    };
    config.paths.corpus = corpus_path;
    config.paths.workdir = dir.join("work");
    config.rater.base_url = "stub://weighted?w=1,1,1,1,8,10,40,25,10,4".into();
    config.rater.model = "stub-judge".into();
    config.embedding.base_url = "stub://hash?d=16".into();
    config.embedding.model = "stub-encoder".into();
    config.selection.target_size = 50;
    config
}

#[test]
fn select_without_curation_names_the_missing_stage() {
    let dir = tempfile::tempdir().expect("tempdir");
    let config = stub_config(dir.path(), 60);
    let pipeline = Pipeline::from_config(config, dir.path().to_path_buf());
    let err = pipeline.run(Stage::Select).expect_err("must fail");
    let message = err.to_string();
    assert!(
        message.contains("curate"),
        "error should name the curate stage: {message}"
    );
}

#[test]
fn estimate_without_knn_names_the_missing_stage() {
    let dir = tempfile::tempdir().expect("tempdir");
    let config = stub_config(dir.path(), 60);
    let pipeline = Pipeline::from_config(config, dir.path().to_path_buf());
    pipeline.run(Stage::Rate).expect("rate");
    let err = pipeline.run(Stage::Estimate).expect_err("must fail");
    let message = err.to_string();
    assert!(
        message.contains("knn"),
        "error should name the knn stage: {message}"
    );
}

fn workdir_snapshot(workdir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![workdir.to_path_buf()];
    while let Some(current) = stack.pop() {
        for entry in fs::read_dir(&current).expect("read dir") {
            let entry = entry.expect("entry");
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = fs::read(&path).expect("read file");
                files.push((path, bytes));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn rerun_all_is_byte_identical() {
    let dir = tempfile::tempdir().expect("tempdir");
    let config = stub_config(dir.path(), 120);
    let pipeline = Pipeline::from_config(config, dir.path().to_path_buf());
    pipeline.run(Stage::All).expect("first run");
    let before = workdir_snapshot(&pipeline.workdir());
    pipeline.run(Stage::All).expect("second run");
    let after = workdir_snapshot(&pipeline.workdir());
    assert_eq!(before.len(), after.len());
    for ((path_a, bytes_a), (path_b, bytes_b)) in before.iter().zip(&after) {
        assert_eq!(path_a, path_b);
        assert_eq!(bytes_a, bytes_b, "{} changed on rerun", path_a.display());
    }
}

#[test]
fn full_pipeline_is_deterministic_across_workdirs() {
    let dir_a = tempfile::tempdir().expect("tempdir");
    let dir_b = tempfile::tempdir().expect("tempdir");
    for dir in [&dir_a, &dir_b] {
        let config = stub_config(dir.path(), 120);
        let pipeline = Pipeline::from_config(config, dir.path().to_path_buf());
        pipeline.run(Stage::All).expect("run");
    }
    let selected_a =
        fs::read_to_string(dir_a.path().join("work/selected.jsonl")).expect("selected a");
    let selected_b =
        fs::read_to_string(dir_b.path().join("work/selected.jsonl")).expect("selected b");
    assert_eq!(selected_a, selected_b);
}

#[test]
fn changed_upstream_input_is_detected_as_stale() {
    let dir = tempfile::tempdir().expect("tempdir");
    let config = stub_config(dir.path(), 60);
    let corpus_path = config.paths.corpus.clone();
    let pipeline = Pipeline::from_config(config, dir.path().to_path_buf());
    pipeline.run(Stage::Rate).expect("rate");
    pipeline.run(Stage::Embed).expect("embed");
    pipeline.run(Stage::Knn).expect("knn");

    // Mutate the corpus behind the pipeline's back: downstream consumers of
    // the knn table must refuse to run until knn is re-run.
    let mut corpus_text = fs::read_to_string(&corpus_path).expect("read corpus");
    corpus_text.push_str(
        "{\"id\":\"extra\",\"dataset\":\"d\",\"instruction\":\"Q\",\"input\":\"\",\"output\":\"A\"}\n",
    );
    fs::write(&corpus_path, corpus_text).expect("write corpus");

    let err = pipeline.run(Stage::Estimate).expect_err("must detect staleness");
    let message = err.to_string();
    assert!(
        message.contains("stale"),
        "expected a stale-artifact error, got: {message}"
    );
}

#[test]
fn external_scores_skip_rating_entirely() {
    let dir = tempfile::tempdir().expect("tempdir");
    let mut config = stub_config(dir.path(), 60);
    // Produce a scores file once, then hand it over as an external input
    // with the rater pointed at a dead endpoint.
    let pipeline = Pipeline::from_config(config.clone(), dir.path().to_path_buf());
    pipeline.run(Stage::Rate).expect("rate");
    let scores = dir.path().join("external_scores.jsonl");
    fs::copy(dir.path().join("work/scores.jsonl"), &scores).expect("copy");

    config.paths.scores = Some(scores);
    config.paths.workdir = dir.path().join("work2");
    config.rater.base_url = "http://127.0.0.1:9".into(); // nothing listens here
    let pipeline = Pipeline::from_config(config, dir.path().to_path_buf());
    pipeline.run(Stage::All).expect("all with external scores");
    assert!(dir.path().join("work2/selected.jsonl").exists());
    assert!(!dir.path().join("work2/scores.jsonl").exists());
}

#[test]
fn simulate_feeds_the_pipeline() {
    let dir = tempfile::tempdir().expect("tempdir");
    let mut config = stub_config(dir.path(), 10);
    config.simulate.n = 400;
    config.simulate.dim = 8;
    config.simulate.noise = 0.3;
    config.selection.target_size = 80;
    let pipeline = Pipeline::from_config(config.clone(), dir.path().to_path_buf());
    pipeline.run(Stage::Simulate).expect("simulate");

    let truth: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(dir.path().join("work/truth.json")).expect("truth"),
    )
    .expect("truth json");
    assert!(truth["true_t"].is_array());
    assert!(truth["clusterability_violation_rate"].as_f64().unwrap() < 0.05);

    // The synthetic corpus flows through the remaining stages unchanged.
    config.paths.corpus = dir.path().join("work/synth_corpus.jsonl");
    let pipeline = Pipeline::from_config(config, dir.path().to_path_buf());
    for stage in [
        Stage::Knn,
        Stage::Estimate,
        Stage::Curate,
        Stage::Diversity,
        Stage::Select,
        Stage::Report,
    ] {
        pipeline.run(stage).expect("stage");
    }
    assert!(dir.path().join("work/report/report.json").exists());
}

#[test]
fn cli_reports_config_errors_with_nonzero_exit() {
    let output = Command::new(env!("CARGO_BIN_EXE_ds2"))
        .arg("--config")
        .arg("/nonexistent/ds2.json")
        .arg("rate")
        .output()
        .expect("spawn");
    assert!(!output.status.success());
    assert!(!output.stderr.is_empty());
}

#[test]
fn cli_seed_and_workdir_overrides() {
    let dir = tempfile::tempdir().expect("tempdir");
    let config = stub_config(dir.path(), 40);
    let config_path = dir.path().join("ds2.json");
    fs::write(&config_path, serde_json::to_string_pretty(&config).unwrap()).expect("write");
    let override_dir = dir.path().join("override-work");
    let output = Command::new(env!("CARGO_BIN_EXE_ds2"))
        .arg("--config")
        .arg(&config_path)
        .arg("--workdir")
        .arg(&override_dir)
        .arg("--seed")
        .arg("123")
        .arg("rate")
        .output()
        .expect("spawn");
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    assert!(override_dir.join("scores.jsonl").exists());
    let meta: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(override_dir.join("scores.jsonl.meta.json")).expect("meta"),
    )
    .expect("meta json");
    assert_eq!(meta["seed"].as_u64(), Some(123));
}

#[test]
fn report_emits_overlap_crosstab_for_two_raters() {
    let dir = tempfile::tempdir().expect("tempdir");
    let mut config = stub_config(dir.path(), 150);
    let pipeline = Pipeline::from_config(config.clone(), dir.path().to_path_buf());
    pipeline.run(Stage::Rate).expect("rate");

    // A second rater with a different skew over the same corpus.
    let mut other = stub_config(dir.path(), 150);
    other.paths.workdir = dir.path().join("work-other");
    other.rater.base_url = "stub://weighted?w=10,10,10,10,20,20,10,5,3,2".into();
    let other_pipeline = Pipeline::from_config(other, dir.path().to_path_buf());
    other_pipeline.run(Stage::Rate).expect("rate other");

    config.report.compare_scores = Some(dir.path().join("work-other/scores.jsonl"));
    let pipeline = Pipeline::from_config(config, dir.path().to_path_buf());
    pipeline.run(Stage::Embed).expect("embed");
    pipeline.run(Stage::Knn).expect("knn");
    pipeline.run(Stage::Report).expect("report");

    let overlap = fs::read_to_string(dir.path().join("work/report/overlap.csv")).expect("overlap");
    assert!(overlap.starts_with("primary\\compare,0,1,2,3,4,5"));
    let report: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(dir.path().join("work/report/report.json")).expect("report"),
    )
    .expect("report json");
    let table = report["overlap"]["table"].as_array().expect("table");
    assert_eq!(table.len(), 6);
    let total: u64 = table
        .iter()
        .flat_map(|row| row.as_array().expect("row").iter())
        .map(|v| v.as_u64().expect("count"))
        .sum();
    assert_eq!(total, 150, "every shared id lands in one cell");
}
