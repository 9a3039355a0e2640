//! Drive the whole staged pipeline through its config API with offline
//! stub endpoints, exactly as the `ds2 all` CLI would.
//!
//! ```bash
//! cargo run --release --example full_pipeline
//! ```

use anyhow::Result;
use ds2::corpus::save_corpus;
use ds2::pipeline::{Pipeline, PipelineConfig, Stage};
use ds2::synthlab::toy_corpus;

fn main() -> Result<()> {
    let dir = tempfile::tempdir()?;
    let corpus_path = dir.path().join("corpus.jsonl");
    save_corpus(&toy_corpus(500, 42), &corpus_path)?;

    let mut config = PipelineConfig {
        seed: 42,
        ..Default::default()
    };
    config.paths.corpus = corpus_path;
    config.paths.workdir = dir.path().join("work");
    config.rater.base_url = "stub://weighted?w=2,2,2,2,6,12,55,15,3,1".into();
    config.rater.model = "offline-judge".into();
    config.embedding.base_url = "stub://hash?d=32".into();
    config.embedding.model = "offline-encoder".into();
    config.selection.target_size = 100;

    let pipeline = Pipeline::from_config(config, dir.path().to_path_buf());
    pipeline.run(Stage::All)?;

    println!("\nartifacts:");
    let workdir = pipeline.workdir();
    let mut names: Vec<String> = std::fs::read_dir(&workdir)?
        .filter_map(|entry| entry.ok())
        .map(|entry| entry.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    for name in names {
        println!("  {name}");
    }

    println!("\nrerun is a no-op thanks to input-hash sidecars:");
    pipeline.run(Stage::All)?;

    let selected = std::fs::read_to_string(workdir.join("selected.jsonl"))?;
    println!(
        "\nfirst selected line:\n{}",
        selected.lines().next().unwrap_or("<empty>")
    );
    Ok(())
}
