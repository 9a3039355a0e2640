//! Rate a corpus with the deterministic offline stub and inspect the
//! prompt, the parsed rating, and the 1-10 -> 0-5 rescaling.
//!
//! ```bash
//! cargo run --example rate_offline
//! ```

use anyhow::Result;
use ds2::client::{chat_backend, EndpointConfig};
use ds2::rater::{build_prompt, parse_rating, rate_corpus, rescale_score, RaterOptions};
use ds2::synthlab::toy_corpus;

fn main() -> Result<()> {
    let corpus = toy_corpus(200, 11);

    let (system, user) = build_prompt(&corpus.samples()[0]);
    println!("system prompt:\n{system}\n");
    println!("user prompt (truncated):\n{}...\n", &user[..user.len().min(400)]);

    // A weighted stub: overall ratings 1-10 drawn deterministically per
    // sample, skewed toward 7 (rated score 3).
    let endpoint = EndpointConfig {
        base_url: "stub://weighted?w=2,2,2,2,6,12,55,15,3,1".into(),
        model: "offline-judge".into(),
        ..Default::default()
    };
    let backend = chat_backend(&endpoint)?;

    let reply = backend.complete("offline-judge", &system, &user)?;
    let parsed = parse_rating(&reply)?;
    println!("stub reply: {reply}");
    println!(
        "parsed overall {} -> rated score {}",
        parsed.rating.overall,
        rescale_score(parsed.rating.overall)?.value()
    );

    let dir = tempfile::tempdir()?;
    let cache = dir.path().join("rate_cache.jsonl");
    let outcome = rate_corpus(
        &corpus,
        backend.as_ref(),
        "offline-judge",
        &cache,
        &RaterOptions::default(),
    )?;
    let mut histogram = [0usize; 6];
    for row in &outcome.rows {
        histogram[row.score as usize] += 1;
    }
    println!("\nrated {} samples with {} requests", outcome.rows.len(), outcome.requests);
    println!("score histogram (0..5): {histogram:?}");

    let rerun = rate_corpus(
        &corpus,
        backend.as_ref(),
        "offline-judge",
        &cache,
        &RaterOptions::default(),
    )?;
    println!(
        "warm rerun: {} cache hits, {} network requests",
        rerun.cache_hits, rerun.requests
    );
    Ok(())
}
