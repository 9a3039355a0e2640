//! Long-tail diversity scores: rare, isolated samples score high; samples
//! in dense clusters score near zero.
//!
//! ```bash
//! cargo run --release --example diversity_scores
//! ```

use anyhow::Result;
use ds2::diversity::long_tail_scores;
use ds2::knn::build_neighbor_table;
use ds2::synthlab::{generate, SynthConfig};

fn main() -> Result<()> {
    // Loose clusters in a low dimension so the long-tail spread is visible.
    let mut config = SynthConfig::uniform_noise(3_000, 6, 16, 0.2, 0.0, 5);
    config.center_separation = 0.4;
    let data = generate(&config)?;
    let table = build_neighbor_table(&data.embeddings, 10)?;
    let scores = long_tail_scores(&table, 10)?;

    let mut order: Vec<usize> = (0..scores.values.len()).collect();
    order.sort_by(|&a, &b| scores.values[b].total_cmp(&scores.values[a]));

    println!("highest long-tail (most isolated) samples:");
    for &i in order.iter().take(5) {
        println!("  sample {i}: {:.4}", scores.values[i]);
    }
    println!("lowest long-tail (most redundant) samples:");
    for &i in order.iter().rev().take(5) {
        println!("  sample {i}: {:.4}", scores.values[i]);
    }

    let mean = scores.values.iter().sum::<f64>() / scores.values.len() as f64;
    let buckets = 10;
    let max = scores
        .values
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut hist = vec![0usize; buckets];
    for &v in &scores.values {
        let bin = ((v / (max + 1e-12)) * buckets as f64) as usize;
        hist[bin.min(buckets - 1)] += 1;
    }
    println!("\nmean long-tail score {mean:.4}; histogram up to {max:.3}:");
    for (i, count) in hist.iter().enumerate() {
        let bar = "#".repeat(count * 60 / scores.values.len().max(1));
        println!("  [{:4.2}..{:4.2}) {bar}", i as f64 * max / buckets as f64, (i + 1) as f64 * max / buckets as f64);
    }
    Ok(())
}
