//! Score curation: rank samples by k-NN agreement within each observed
//! score class, flag the expected-misrated count from the Bayes threshold,
//! stabilise decisions with confidence probabilities over several epochs,
//! and emit curated scores.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consensus::{per_class_noise, TransitionEstimate};
use crate::knn::{neighbor_counts, validate_scores, NeighborTable};
use crate::util::derive_seed;

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("vectors have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("subset size {m} out of range for k={k}")]
    SubsetSize { m: usize, k: usize },
    #[error("need at least one epoch")]
    NoEpochs,
    #[error("ids length {got} does not match scores length {expected}")]
    IdsLength { got: usize, expected: usize },
    #[error(transparent)]
    Scores(#[from] crate::knn::KnnError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("curated file line {line}: {message}")]
    BadLine { line: usize, message: String },
}

/// Cosine similarity between two vectors.
pub fn similarity_score(v1: &[f64], v2: &[f64]) -> Result<f64, CurationError> {
    if v1.len() != v2.len() {
        return Err(CurationError::LengthMismatch(v1.len(), v2.len()));
    }
    let dot: f64 = v1.iter().zip(v2).map(|(a, b)| a * b).sum();
    let n1: f64 = v1.iter().map(|a| a * a).sum::<f64>().sqrt();
    let n2: f64 = v2.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(CurationError::ZeroVector);
    }
    Ok(dot / (n1 * n2))
}

/// Agreement between a one-hot score and neighbour counts without building
/// the vectors: counts[score] / ||counts||.
fn agreement_from_counts(counts: &[u64], score: usize) -> f64 {
    let norm: f64 = counts.iter().map(|&c| (c as f64) * (c as f64)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return 0.0;
    }
    counts[score] as f64 / norm
}

/// Majority neighbour score; ties prefer the original score, then the lower
/// score.
fn candidate_from_counts(counts: &[u64], original: usize) -> u8 {
    let max = counts.iter().copied().max().unwrap_or(0);
    if counts[original] == max {
        return original as u8;
    }
    counts
        .iter()
        .position(|&c| c == max)
        .expect("max exists") as u8
}

/// One epoch's flag / candidate decision per sample.
#[derive(Debug, Clone)]
pub struct EpochOutcome {
    pub flagged: Vec<bool>,
    pub candidates: Vec<u8>,
    pub agreements: Vec<f64>,
}

/// Run one curation epoch: draw an m-of-k neighbour subset per sample,
/// compute agreement and candidate, and flag the lowest-agreement samples in
/// each observed class up to its Bayes threshold.
pub fn curation_epoch(
    table: &NeighborTable,
    scores: &[u8],
    estimate: &TransitionEstimate,
    subset_size: usize,
    seed: u64,
) -> Result<EpochOutcome, CurationError> {
    let num_classes = estimate.p.len();
    validate_scores(scores, table.len(), num_classes)?;
    let k = table.k();
    if subset_size == 0 || subset_size > k {
        return Err(CurationError::SubsetSize { m: subset_size, k });
    }
    let n = table.len();

    let per_sample: Vec<(f64, u8)> = (0..n)
        .into_par_iter()
        .map(|position| {
            let slots = draw_subset(seed, position as u64, k, subset_size);
            let counts = neighbor_counts(table, scores, num_classes, position, Some(&slots))
                .expect("validated above");
            let original = scores[position] as usize;
            (
                agreement_from_counts(&counts, original),
                candidate_from_counts(&counts, original),
            )
        })
        .collect();

    let mut counts_per_class = vec![0usize; num_classes];
    for &score in scores {
        counts_per_class[score as usize] += 1;
    }
    let thresholds = per_class_noise(estimate, &counts_per_class);

    let mut flagged = vec![false; n];
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (position, &score) in scores.iter().enumerate() {
        by_class[score as usize].push(position);
    }
    for (class, members) in by_class.iter().enumerate() {
        let budget = thresholds[class];
        if budget == 0 {
            continue;
        }
        let mut ranked: Vec<usize> = members.clone();
        // Lowest agreement first; ties by sample position.
        ranked.sort_by(|&a, &b| {
            per_sample[a]
                .0
                .partial_cmp(&per_sample[b].0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        for &position in ranked.iter().take(budget) {
            flagged[position] = true;
        }
    }

    Ok(EpochOutcome {
        flagged,
        candidates: per_sample.iter().map(|x| x.1).collect(),
        agreements: per_sample.iter().map(|x| x.0).collect(),
    })
}

/// Partial Fisher-Yates draw of `m` distinct slots out of `0..k`, seeded per
/// (epoch seed, sample position).
fn draw_subset(seed: u64, position: u64, k: usize, m: usize) -> Vec<usize> {
    if m >= k {
        return (0..k).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xcafe, position));
    let mut slots: Vec<usize> = (0..k).collect();
    for i in 0..m {
        let j = rng.random_range(i..k);
        slots.swap(i, j);
    }
    slots.truncate(m);
    slots
}

/// Per-sample curation state after all epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct CurationRecord {
    pub id: String,
    pub original: u8,
    /// Agreement between the one-hot original score and the full-k soft
    /// neighbour score.
    pub agreement: f64,
    /// Flagged as misrated in at least one epoch.
    pub flagged: bool,
    /// Winning candidate score across flagged epochs.
    pub candidate: u8,
    /// Fraction of epochs that flagged this sample.
    pub flag_rate: f64,
    /// Distribution of candidate scores over flagged epochs; all zero when
    /// the sample was never flagged.
    pub candidate_dist: Vec<f64>,
    /// `candidate_dist[candidate] * flag_rate`.
    pub confidence: f64,
    pub curated: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurationOptions {
    pub epochs: usize,
    pub subset_size: usize,
    pub confidence_threshold: f64,
    pub seed: u64,
}

/// Run `epochs` curation epochs with derived seeds and aggregate them into
/// confidence-gated curated scores: a correction applies only when
/// `candidate_dist[j*] * flag_rate >= confidence_threshold` and the winning
/// candidate differs from the original score.
pub fn curate(
    table: &NeighborTable,
    scores: &[u8],
    ids: &[String],
    estimate: &TransitionEstimate,
    opts: &CurationOptions,
) -> Result<Vec<CurationRecord>, CurationError> {
    let num_classes = estimate.p.len();
    validate_scores(scores, table.len(), num_classes)?;
    if ids.len() != scores.len() {
        return Err(CurationError::IdsLength {
            got: ids.len(),
            expected: scores.len(),
        });
    }
    if opts.epochs == 0 {
        return Err(CurationError::NoEpochs);
    }

    let epochs: Vec<EpochOutcome> = (0..opts.epochs)
        .map(|epoch| {
            curation_epoch(
                table,
                scores,
                estimate,
                opts.subset_size,
                derive_seed(opts.seed, 0xe9, epoch as u64),
            )
        })
        .collect::<Result<_, _>>()?;

    let n = scores.len();
    let mut records = Vec::with_capacity(n);
    for position in 0..n {
        let original = scores[position];
        let full_counts = neighbor_counts(table, scores, num_classes, position, None)
            .expect("validated above");
        let agreement = agreement_from_counts(&full_counts, original as usize);

        let flagged_epochs: Vec<&EpochOutcome> = epochs
            .iter()
            .filter(|e| e.flagged[position])
            .collect();
        let flag_rate = flagged_epochs.len() as f64 / opts.epochs as f64;

        let mut candidate_dist = vec![0.0; num_classes];
        let (candidate, confidence) = if flagged_epochs.is_empty() {
            (original, 0.0)
        } else {
            let mut votes = vec![0usize; num_classes];
            for epoch in &flagged_epochs {
                votes[epoch.candidates[position] as usize] += 1;
            }
            for (slot, &count) in votes.iter().enumerate() {
                candidate_dist[slot] = count as f64 / flagged_epochs.len() as f64;
            }
            let top = *votes.iter().max().expect("non-empty");
            // Ties toward the original score, then the lower score.
            let winner = if votes[original as usize] == top {
                original as usize
            } else {
                votes.iter().position(|&v| v == top).expect("max exists")
            };
            (winner as u8, candidate_dist[winner] * flag_rate)
        };

        let curated = if flag_rate > 0.0
            && confidence >= opts.confidence_threshold
            && candidate != original
        {
            candidate
        } else {
            original
        };

        records.push(CurationRecord {
            id: ids[position].clone(),
            original,
            agreement,
            flagged: flag_rate > 0.0,
            candidate,
            flag_rate,
            candidate_dist,
            confidence,
            curated,
        });
    }
    Ok(records)
}

/// Histograms and movement counts before/after curation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurationReport {
    pub before: Vec<usize>,
    pub after: Vec<usize>,
    /// movement[i][j] counts samples corrected from original i to curated j.
    pub movement: Vec<Vec<usize>>,
    pub corrected: usize,
    pub flagged: usize,
}

pub fn curation_report(records: &[CurationRecord], num_classes: usize) -> CurationReport {
    let mut before = vec![0usize; num_classes];
    let mut after = vec![0usize; num_classes];
    let mut movement = vec![vec![0usize; num_classes]; num_classes];
    let mut corrected = 0;
    let mut flagged = 0;
    for record in records {
        before[record.original as usize] += 1;
        after[record.curated as usize] += 1;
        if record.curated != record.original {
            movement[record.original as usize][record.curated as usize] += 1;
            corrected += 1;
        }
        if record.flagged {
            flagged += 1;
        }
    }
    CurationReport {
        before,
        after,
        movement,
        corrected,
        flagged,
    }
}

/// File row: the pinned `{"id","original","curated","flagged","confidence","agreement"}`
/// schema.
#[derive(Serialize, Deserialize)]
struct CuratedLine {
    id: String,
    original: u8,
    curated: u8,
    flagged: bool,
    confidence: f64,
    agreement: f64,
}

pub fn save_curated(records: &[CurationRecord], path: &Path) -> Result<(), CurationError> {
    let io_err = |source| CurationError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut writer = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(&CuratedLine {
            id: record.id.clone(),
            original: record.original,
            curated: record.curated,
            flagged: record.flagged,
            confidence: record.confidence,
            agreement: record.agreement,
        })
        .expect("curated line serialisation cannot fail");
        writeln!(writer, "{line}").map_err(io_err)?;
    }
    writer.flush().map_err(io_err)
}

/// Minimal view loaded back from a curated-scores file.
#[derive(Debug, Clone, PartialEq)]
pub struct CuratedRow {
    pub id: String,
    pub original: u8,
    pub curated: u8,
    pub flagged: bool,
    pub confidence: f64,
    pub agreement: f64,
}

pub fn load_curated(path: &Path) -> Result<Vec<CuratedRow>, CurationError> {
    let io_err = |source| CurationError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let mut rows = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CuratedLine =
            serde_json::from_str(&line).map_err(|e| CurationError::BadLine {
                line: idx + 1,
                message: e.to_string(),
            })?;
        rows.push(CuratedRow {
            id: parsed.id,
            original: parsed.original,
            curated: parsed.curated,
            flagged: parsed.flagged,
            confidence: parsed.confidence,
            agreement: parsed.agreement,
        });
    }
    Ok(rows)
}
