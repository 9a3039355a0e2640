//! Load, validate, render, and round-trip a corpus.
//!
//! ```bash
//! cargo run --example corpus_tour
//! ```

use anyhow::Result;
use ds2::corpus::{load_corpus, render_tulu, save_corpus, CorpusFormat};
use ds2::synthlab::toy_corpus;

fn main() -> Result<()> {
    let corpus = toy_corpus(25, 7);
    println!("built a toy corpus of {} samples", corpus.len());

    let sample = &corpus.samples()[0];
    println!("\nfirst sample ({} / {}):", sample.id, sample.dataset);
    println!("--- Tulu rendering ---");
    println!("{}", render_tulu(sample));
    println!("----------------------");

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("corpus.jsonl");
    save_corpus(&corpus, &path)?;
    let reloaded = load_corpus(&path, CorpusFormat::Flat)?;
    println!(
        "\nround-trip through {} preserved all {} samples: {}",
        path.display(),
        reloaded.len(),
        reloaded.samples() == corpus.samples()
    );

    // The messages format flattens multi-turn conversations.
    let messages_path = dir.path().join("messages.jsonl");
    std::fs::write(
        &messages_path,
        concat!(
            r#"{"id":"conv-1","dataset":"oasst","messages":[{"role":"user","content":"Name a prime."},"#,
            r#"{"role":"assistant","content":"7."},{"role":"user","content":"A bigger one?"},"#,
            r#"{"role":"assistant","content":"101."}]}"#,
            "\n"
        ),
    )?;
    let conversations = load_corpus(&messages_path, CorpusFormat::Messages)?;
    let conv = &conversations.samples()[0];
    println!(
        "\nmessages format: {} rounds flattened into instruction {:?} / response {:?}",
        conv.n_rounds, conv.instruction, conv.response
    );
    Ok(())
}
