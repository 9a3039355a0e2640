//! Run the selection stage against the model-free baselines on the same
//! synthetic pool and compare what they pick.
//!
//! ```bash
//! cargo run --release --example select_subset
//! ```

use std::collections::HashSet;

use anyhow::Result;
use ds2::consensus::{count_consensus, solve_transition, SolveOptions};
use ds2::curation::{curate, CurationOptions};
use ds2::diversity::long_tail_scores;
use ds2::knn::build_neighbor_table;
use ds2::selector::{
    dataset_proportions, select_baseline, select_ds2, select_ds2_no_curation, Strategy,
};
use ds2::synthlab::{generate, synthetic_corpus, SynthConfig};

fn main() -> Result<()> {
    let config = SynthConfig::uniform_noise(4_000, 6, 16, 0.08, 0.3, 23);
    let data = generate(&config)?;
    let corpus = synthetic_corpus(&data);
    let table = build_neighbor_table(&data.embeddings, 10)?;

    let stats = count_consensus(&table, &data.observed_scores, 6, 3, 2)?;
    let estimate = solve_transition(&stats, &SolveOptions::default())?;
    let ids: Vec<String> = corpus.ids().map(str::to_string).collect();
    let records = curate(
        &table,
        &data.observed_scores,
        &ids,
        &estimate,
        &CurationOptions {
            epochs: 5,
            subset_size: 8,
            confidence_threshold: 0.4,
            seed: 3,
        },
    )?;
    let diversity = long_tail_scores(&table, 10)?;

    let m = 400;
    let curated = select_ds2(&records, &diversity, &corpus, m)?;
    let uncurated = select_ds2_no_curation(&records, &diversity, &corpus, m)?;
    let random = select_baseline(&corpus, None, Strategy::Random, m, 7)?;
    let length = select_baseline(&corpus, None, Strategy::Length, m, 7)?;
    let knn_dist = select_baseline(&corpus, Some(&diversity), Strategy::KnnDistance, m, 7)?;

    let truth_quality = |ids: &HashSet<&str>| -> f64 {
        corpus
            .samples()
            .iter()
            .enumerate()
            .filter(|(_, s)| ids.contains(s.id.as_str()))
            .map(|(i, _)| data.true_scores[i] as f64)
            .sum::<f64>()
            / ids.len() as f64
    };

    println!("mean TRUE quality of each selected subset (higher is better):");
    for (name, result) in [
        ("ds2 (curated)", &curated),
        ("ds2 w/o curation", &uncurated),
        ("random", &random),
        ("completion length", &length),
        ("knn-distance", &knn_dist),
    ] {
        let ids: HashSet<&str> = result.ids().collect();
        println!("  {name:18} {:.3}", truth_quality(&ids));
    }

    let curated_ids: HashSet<&str> = curated.ids().collect();
    let uncurated_ids: HashSet<&str> = uncurated.ids().collect();
    println!(
        "\ncurated vs uncurated overlap: {} of {m}",
        curated_ids.intersection(&uncurated_ids).count()
    );

    println!("\nwithin the curated selection, fill order obeys (score desc, long-tail desc):");
    for entry in curated.entries.iter().take(5) {
        println!(
            "  {} score {:?} long-tail {:.4}",
            entry.id, entry.score, entry.long_tail.unwrap_or(0.0)
        );
    }
    println!("\ndataset proportions of the curated selection:");
    for (dataset, count, share) in dataset_proportions(&curated) {
        println!("  {dataset}: {count} ({share:.1}%)", share = share * 100.0);
    }
    Ok(())
}
