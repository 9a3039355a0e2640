//! Estimate the score transition matrix and prior from k-NN consensus
//! statistics on a synthetic corpus with a known injected error pattern.
//!
//! ```bash
//! cargo run --release --example estimate_transition
//! ```

use anyhow::Result;
use ds2::consensus::{count_consensus, solve_transition, SolveOptions};
use ds2::knn::build_neighbor_table;
use ds2::synthlab::{clusterability_violation_rate, evaluate_recovery, generate, SynthConfig};

fn print_matrix(label: &str, m: &[Vec<f64>]) {
    println!("{label}:");
    for row in m {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:5.2}")).collect();
        println!("  [{}]", cells.join(" "));
    }
}

fn main() -> Result<()> {
    // 25% uniform rating noise over six score classes.
    let config = SynthConfig::uniform_noise(8_000, 6, 32, 0.05, 0.25, 42);
    let data = generate(&config)?;
    println!(
        "generated {} samples; observed-vs-true score accuracy {:.3}",
        config.n,
        data.observed_scores
            .iter()
            .zip(&data.true_scores)
            .filter(|(a, b)| a == b)
            .count() as f64
            / config.n as f64
    );

    let table = build_neighbor_table(&data.embeddings, 10)?;
    println!(
        "clusterability violation rate at k=10: {:.4}",
        clusterability_violation_rate(&table, &data.true_scores)
    );

    let stats = count_consensus(&table, &data.observed_scores, 6, 3, 7)?;
    println!("tallied {} neighbour tuples", stats.tuple_count);

    let estimate = solve_transition(&stats, &SolveOptions::default())?;
    print_matrix("estimated T", &estimate.t);
    print_matrix("injected T", &config.true_t);
    println!("estimated p: {:?}", estimate.p.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>());

    let metrics = evaluate_recovery(&config.true_t, &config.true_p, &estimate, None);
    println!(
        "recovery: mean |dT| {:.4}, max |dT| {:.4}, max |dp| {:.4} (residual {:.2e}, restart {})",
        metrics.t_mean_abs, metrics.t_max_abs, metrics.p_max_abs, estimate.residual, estimate.restart
    );
    Ok(())
}
