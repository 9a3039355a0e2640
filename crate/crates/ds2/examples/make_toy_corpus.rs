//! Regenerate the bundled toy corpus (or make a bigger one to play with).
//!
//! ```bash
//! cargo run --example make_toy_corpus -- [N] [SEED] [PATH]
//! ```

use std::path::PathBuf;

use anyhow::Result;
use ds2::corpus::save_corpus;
use ds2::synthlab::toy_corpus;

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map(|a| a.parse()).transpose()?.unwrap_or(1000);
    let seed: u64 = args.next().map(|a| a.parse()).transpose()?.unwrap_or(7);
    let path: PathBuf = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("toy_corpus.jsonl"));

    let corpus = toy_corpus(n, seed);
    save_corpus(&corpus, &path)?;
    println!("wrote {} samples to {}", corpus.len(), path.display());
    Ok(())
}
