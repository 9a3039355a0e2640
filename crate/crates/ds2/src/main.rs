//! Thin CLI over the pipeline: one subcommand per stage, driven by a single
//! JSON config file. Global flags override the config; DS2_API_BASE,
//! DS2_API_KEY, and DS2_MODEL override endpoint credentials.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ds2::pipeline::{Pipeline, Stage};

#[derive(Parser)]
#[command(
    name = "ds2",
    about = "Rate, curate, and select instruction-tuning data",
    version
)]
struct Cli {
    /// Pipeline config file (JSON).
    #[arg(long, global = true, default_value = "ds2.json")]
    config: PathBuf,
    /// Override paths.workdir from the config.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// Override the global seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rate every sample with the configured judge endpoint.
    Rate,
    /// Fetch (or reuse) embeddings for every sample.
    Embed,
    /// Build the exact cosine k-NN table.
    Knn,
    /// Estimate the score transition matrix and prior.
    Estimate,
    /// Detect and correct misrated samples.
    Curate,
    /// Compute long-tail diversity scores.
    Diversity,
    /// Select the final subset.
    Select,
    /// Generate a synthetic corpus with known ground truth.
    Simulate,
    /// Emit the report bundle (histograms, heatmap, proportions).
    Report,
    /// Run every stage in order.
    All,
}

impl Command {
    fn stage(&self) -> Stage {
        match self {
            Command::Rate => Stage::Rate,
            Command::Embed => Stage::Embed,
            Command::Knn => Stage::Knn,
            Command::Estimate => Stage::Estimate,
            Command::Curate => Stage::Curate,
            Command::Diversity => Stage::Diversity,
            Command::Select => Stage::Select,
            Command::Simulate => Stage::Simulate,
            Command::Report => Stage::Report,
            Command::All => Stage::All,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut pipeline = match Pipeline::load(&cli.config) {
        Ok(pipeline) => pipeline,
        Err(err) => {
            eprintln!("ds2: {err}");
            return ExitCode::FAILURE;
        }
    };
    if let Some(workdir) = cli.workdir {
        pipeline.config_mut().paths.workdir = workdir;
    }
    if let Some(seed) = cli.seed {
        pipeline.config_mut().seed = seed;
    }
    match pipeline.run(cli.command.stage()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("ds2: {err}");
            ExitCode::FAILURE
        }
    }
}
