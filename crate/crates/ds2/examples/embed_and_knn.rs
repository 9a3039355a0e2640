//! Embed a corpus with the hash stub, normalise, and build the exact
//! cosine k-NN table.
//!
//! ```bash
//! cargo run --release --example embed_and_knn
//! ```

use anyhow::Result;
use ds2::client::{embed_backend, EndpointConfig};
use ds2::embedding::{embed_corpus, normalize_rows};
use ds2::knn::{build_neighbor_table, soft_knn_score};
use ds2::synthlab::toy_corpus;

fn main() -> Result<()> {
    let corpus = toy_corpus(400, 3);
    let endpoint = EndpointConfig {
        base_url: "stub://hash?d=64".into(),
        model: "offline-encoder".into(),
        ..Default::default()
    };
    let backend = embed_backend(&endpoint)?;
    let dir = tempfile::tempdir()?;
    let matrix = embed_corpus(
        &corpus,
        backend.as_ref(),
        "offline-encoder",
        &dir.path().join("embed_cache.jsonl"),
        64,
    )?;
    let matrix = normalize_rows(matrix)?;
    println!(
        "embedded {} samples at dimension {} (all unit rows: {})",
        matrix.len(),
        matrix.dim(),
        matrix.is_normalized(1e-6)
    );

    let k = 10;
    let table = build_neighbor_table(&matrix, k)?;
    let mean_top: f64 = (0..table.len())
        .map(|row| table.sims_of(row)[0] as f64)
        .sum::<f64>()
        / table.len() as f64;
    let mean_kth: f64 = (0..table.len())
        .map(|row| table.sims_of(row)[k - 1] as f64)
        .sum::<f64>()
        / table.len() as f64;
    println!("exact {k}-NN table built; mean nearest sim {mean_top:.3}, mean {k}-th sim {mean_kth:.3}");

    // Soft neighbour score distribution for one sample under fake scores.
    let scores: Vec<u8> = (0..corpus.len()).map(|i| (i % 6) as u8).collect();
    let soft = soft_knn_score(&table, &scores, 6, 0, None)?;
    println!("sample 0 neighbour-score distribution: {:?}", soft.probs);
    Ok(())
}
