//! Final subset selection: fill from the highest curated score group down,
//! ordering within each group by long-tail score, plus the model-free
//! baseline selectors used for comparison.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{render_tulu, Corpus};
use crate::curation::CurationRecord;
use crate::diversity::DiversityScores;

#[derive(Debug, Error)]
pub enum SelectorError {
    #[error("target size must be >= 1")]
    ZeroTarget,
    #[error("inputs misaligned: {0}")]
    Misaligned(String),
    #[error("strategy `{0}` needs {1}")]
    MissingInput(&'static str, &'static str),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Selection strategies. `Ds2NoCuration` is the ablation that ranks on the
/// original scores instead of the curated ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Ds2,
    Ds2NoCuration,
    Random,
    Length,
    KnnDistance,
}

/// One selected sample with its provenance, in fill order.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedEntry {
    pub id: String,
    pub dataset: String,
    pub score: Option<u8>,
    pub long_tail: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub entries: Vec<SelectedEntry>,
    /// The requested target size M; `entries.len() < requested` only when
    /// the pool was smaller than M.
    pub requested: usize,
    pub strategy: Strategy,
}

impl SelectionResult {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.id.as_str())
    }
}

/// Rank positions by (score desc, long-tail desc, id asc) and take the first
/// M: exactly the "fill score groups 5..0, sorted by long-tail" rule.
fn rank_by_score_then_long_tail(
    scores: &[u8],
    long_tail: &[f64],
    ids: &[String],
) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .cmp(&scores[a])
            .then_with(|| long_tail[b].total_cmp(&long_tail[a]))
            .then_with(|| ids[a].cmp(&ids[b]))
    });
    order
}

/// Select the top-M subset from curated scores and long-tail scores.
/// Iterates score groups from 5 down to 0, sorting each group by long-tail
/// descending (ties by id ascending), and stops as soon as M samples are
/// collected. `target_size > N` returns the whole pool.
pub fn select_ds2(
    records: &[CurationRecord],
    diversity: &DiversityScores,
    corpus: &Corpus,
    target_size: usize,
) -> Result<SelectionResult, SelectorError> {
    select_score_ranked(records, diversity, corpus, target_size, Strategy::Ds2)
}

/// The "no curation" ablation: identical mechanics on the original scores.
pub fn select_ds2_no_curation(
    records: &[CurationRecord],
    diversity: &DiversityScores,
    corpus: &Corpus,
    target_size: usize,
) -> Result<SelectionResult, SelectorError> {
    select_score_ranked(
        records,
        diversity,
        corpus,
        target_size,
        Strategy::Ds2NoCuration,
    )
}

fn select_score_ranked(
    records: &[CurationRecord],
    diversity: &DiversityScores,
    corpus: &Corpus,
    target_size: usize,
    strategy: Strategy,
) -> Result<SelectionResult, SelectorError> {
    if target_size == 0 {
        return Err(SelectorError::ZeroTarget);
    }
    if records.len() != corpus.len() || diversity.values.len() != corpus.len() {
        return Err(SelectorError::Misaligned(format!(
            "corpus {} vs records {} vs diversity {}",
            corpus.len(),
            records.len(),
            diversity.values.len()
        )));
    }
    for (record, sample) in records.iter().zip(corpus.iter()) {
        if record.id != sample.id {
            return Err(SelectorError::Misaligned(format!(
                "record id `{}` does not match corpus id `{}`",
                record.id, sample.id
            )));
        }
    }
    let scores: Vec<u8> = records
        .iter()
        .map(|r| match strategy {
            Strategy::Ds2NoCuration => r.original,
            _ => r.curated,
        })
        .collect();
    let ids: Vec<String> = corpus.ids().map(str::to_string).collect();
    let order = rank_by_score_then_long_tail(&scores, &diversity.values, &ids);
    let entries = order
        .into_iter()
        .take(target_size)
        .map(|position| SelectedEntry {
            id: ids[position].clone(),
            dataset: corpus.samples()[position].dataset.clone(),
            score: Some(scores[position]),
            long_tail: Some(diversity.values[position]),
        })
        .collect();
    Ok(SelectionResult {
        entries,
        requested: target_size,
        strategy,
    })
}

/// Model-free baselines: seeded uniform sampling, conversation length, and
/// mean k-NN distance (the long-tail score itself).
pub fn select_baseline(
    corpus: &Corpus,
    diversity: Option<&DiversityScores>,
    strategy: Strategy,
    target_size: usize,
    seed: u64,
) -> Result<SelectionResult, SelectorError> {
    if target_size == 0 {
        return Err(SelectorError::ZeroTarget);
    }
    let n = corpus.len();
    let take = target_size.min(n);
    let entries: Vec<SelectedEntry> = match strategy {
        Strategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut positions: Vec<usize> = (0..n).collect();
            for i in 0..take {
                let j = rng.random_range(i..n);
                positions.swap(i, j);
            }
            positions
                .into_iter()
                .take(take)
                .map(|position| entry_for(corpus, position, None, None))
                .collect()
        }
        Strategy::Length => {
            let lengths: Vec<usize> = corpus
                .iter()
                .map(|s| render_tulu(s).chars().count())
                .collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                lengths[b]
                    .cmp(&lengths[a])
                    .then_with(|| corpus.samples()[a].id.cmp(&corpus.samples()[b].id))
            });
            order
                .into_iter()
                .take(take)
                .map(|position| entry_for(corpus, position, None, None))
                .collect()
        }
        Strategy::KnnDistance => {
            let diversity = diversity.ok_or(SelectorError::MissingInput(
                "knn_distance",
                "diversity scores",
            ))?;
            if diversity.values.len() != n {
                return Err(SelectorError::Misaligned(format!(
                    "corpus {} vs diversity {}",
                    n,
                    diversity.values.len()
                )));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                diversity.values[b]
                    .total_cmp(&diversity.values[a])
                    .then_with(|| corpus.samples()[a].id.cmp(&corpus.samples()[b].id))
            });
            order
                .into_iter()
                .take(take)
                .map(|position| entry_for(corpus, position, None, Some(diversity.values[position])))
                .collect()
        }
        Strategy::Ds2 | Strategy::Ds2NoCuration => {
            return Err(SelectorError::MissingInput(
                "ds2",
                "curation records; use select_ds2",
            ))
        }
    };
    Ok(SelectionResult {
        entries,
        requested: target_size,
        strategy,
    })
}

fn entry_for(
    corpus: &Corpus,
    position: usize,
    score: Option<u8>,
    long_tail: Option<f64>,
) -> SelectedEntry {
    let sample = &corpus.samples()[position];
    SelectedEntry {
        id: sample.id.clone(),
        dataset: sample.dataset.clone(),
        score,
        long_tail,
    }
}

#[derive(Serialize)]
struct SelectedLine<'a> {
    id: &'a str,
    dataset: &'a str,
    instruction: &'a str,
    input: &'a str,
    output: &'a str,
    ds2_meta: MetaLine,
}

#[derive(Serialize)]
struct MetaLine {
    rank: usize,
    score: Option<u8>,
    long_tail: Option<f64>,
}

/// Write the selected subset in corpus schema plus a `ds2_meta` object per
/// line carrying rank and provenance.
pub fn save_selection(
    result: &SelectionResult,
    corpus: &Corpus,
    path: &Path,
) -> Result<(), SelectorError> {
    let io_err = |source| SelectorError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut writer = BufWriter::new(file);
    for (rank, entry) in result.entries.iter().enumerate() {
        let sample = corpus.get(&entry.id).ok_or_else(|| {
            SelectorError::Misaligned(format!("selected id `{}` not in corpus", entry.id))
        })?;
        let line = serde_json::to_string(&SelectedLine {
            id: &sample.id,
            dataset: &sample.dataset,
            instruction: &sample.instruction,
            input: &sample.input,
            output: &sample.response,
            ds2_meta: MetaLine {
                rank,
                score: entry.score,
                long_tail: entry.long_tail,
            },
        })
        .expect("selected line serialisation cannot fail");
        writeln!(writer, "{line}").map_err(io_err)?;
    }
    writer.flush().map_err(io_err)
}

/// Per-dataset share of the selection, sorted by dataset name.
pub fn dataset_proportions(result: &SelectionResult) -> Vec<(String, usize, f64)> {
    let mut counts: std::collections::BTreeMap<&str, usize> = std::collections::BTreeMap::new();
    for entry in &result.entries {
        *counts.entry(entry.dataset.as_str()).or_default() += 1;
    }
    let total = result.entries.len().max(1);
    counts
        .into_iter()
        .map(|(dataset, count)| (dataset.to_string(), count, count as f64 / total as f64))
        .collect()
}
