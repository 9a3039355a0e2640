//! Synthetic corpora with known ground truth: clusterable unit-sphere
//! embeddings, true scores drawn from a prior, observed scores pushed
//! through a known transition matrix, plus the brute-force oracles and
//! recovery metrics the acceptance suite is built on.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consensus::{ConsensusStats, TransitionEstimate};
use crate::corpus::{Corpus, DataSample};
use crate::curation::CurationRecord;
use crate::embedding::{normalize_rows, EmbeddingMatrix};
use crate::knn::NeighborTable;
use crate::util::derive_seed;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("could not place {k} centers with separation {separation} in dimension {dim}")]
    CenterConstruction {
        k: usize,
        separation: f64,
        dim: usize,
    },
    #[error("config invalid: {0}")]
    BadConfig(String),
    #[error("brute-force oracle limited to {limit} samples, got {got}")]
    CostGuard { limit: usize, got: usize },
    #[error(transparent)]
    Embedding(#[from] crate::embedding::EmbeddingError),
    #[error(transparent)]
    Scores(#[from] crate::knn::KnnError),
}

/// Generator settings. `sigma` is the intra-cluster gaussian scale before
/// re-normalisation; `center_separation` lower-bounds the pairwise cosine
/// distance between cluster centers. Whether the result actually satisfies
/// neighbourhood clusterability is measured afterwards, not assumed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub num_classes: usize,
    pub dim: usize,
    pub sigma: f64,
    pub center_separation: f64,
    pub true_p: Vec<f64>,
    pub true_t: Vec<Vec<f64>>,
    pub seed: u64,
}

impl SynthConfig {
    /// Uniform prior and a `1 - noise` diagonal with uniform off-diagonal
    /// mass; the standard noise model used throughout the tests.
    pub fn uniform_noise(
        n: usize,
        num_classes: usize,
        dim: usize,
        sigma: f64,
        noise: f64,
        seed: u64,
    ) -> Self {
        let k = num_classes;
        let true_t = (0..k)
            .map(|i| {
                (0..k)
                    .map(|j| {
                        if i == j {
                            1.0 - noise
                        } else {
                            noise / (k - 1) as f64
                        }
                    })
                    .collect()
            })
            .collect();
        SynthConfig {
            n,
            num_classes,
            dim,
            sigma,
            center_separation: 0.5,
            true_p: vec![1.0 / k as f64; k],
            true_t,
            seed,
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        if self.num_classes < 2 || self.dim == 0 || self.n == 0 {
            return Err(SynthError::BadConfig(
                "need n >= 1, num_classes >= 2, dim >= 1".into(),
            ));
        }
        if self.true_p.len() != self.num_classes || self.true_t.len() != self.num_classes {
            return Err(SynthError::BadConfig(
                "true_p / true_t shape must match num_classes".into(),
            ));
        }
        if (self.true_p.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(SynthError::BadConfig("true_p must sum to 1".into()));
        }
        for (i, row) in self.true_t.iter().enumerate() {
            if row.len() != self.num_classes {
                return Err(SynthError::BadConfig(format!("true_t row {i} wrong length")));
            }
            if (row.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return Err(SynthError::BadConfig(format!("true_t row {i} must sum to 1")));
            }
        }
        Ok(())
    }
}

/// A generated corpus: embeddings aligned with `true_scores` (latent) and
/// `observed_scores` (after noise injection).
#[derive(Debug, Clone)]
pub struct SynthData {
    pub embeddings: EmbeddingMatrix,
    pub true_scores: Vec<u8>,
    pub observed_scores: Vec<u8>,
}

fn draw_class(rng: &mut ChaCha8Rng, dist: &[f64]) -> usize {
    let u: f64 = rng.random_range(0.0..1.0);
    let mut acc = 0.0;
    for (idx, &w) in dist.iter().enumerate() {
        acc += w;
        if u < acc {
            return idx;
        }
    }
    dist.len() - 1
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Sample K unit centers with pairwise cosine similarity at most
/// `1 - separation`, by rejection with a bounded number of attempts.
fn sample_centers(
    rng: &mut ChaCha8Rng,
    k: usize,
    dim: usize,
    separation: f64,
) -> Result<Vec<Vec<f64>>, SynthError> {
    'attempt: for _ in 0..1000 {
        let centers: Vec<Vec<f64>> = (0..k).map(|_| unit_gaussian(rng, dim)).collect();
        for i in 0..k {
            for j in i + 1..k {
                let cos: f64 = centers[i].iter().zip(&centers[j]).map(|(a, b)| a * b).sum();
                if cos > 1.0 - separation {
                    continue 'attempt;
                }
            }
        }
        return Ok(centers);
    }
    Err(SynthError::CenterConstruction {
        k,
        separation,
        dim,
    })
}

/// Generate clusterable embeddings with known scores: `y_n ~ true_p`,
/// `x_n = normalize(center[y_n] + sigma * gaussian)`, observed score drawn
/// from row `y_n` of `true_t`. Rows come back unit-normalised.
pub fn generate(config: &SynthConfig) -> Result<SynthData, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let centers = sample_centers(
        &mut rng,
        config.num_classes,
        config.dim,
        config.center_separation,
    )?;

    let mut rows = Vec::with_capacity(config.n);
    let mut true_scores = Vec::with_capacity(config.n);
    let mut observed_scores = Vec::with_capacity(config.n);
    let mut ids = Vec::with_capacity(config.n);
    for idx in 0..config.n {
        let y = draw_class(&mut rng, &config.true_p);
        let row: Vec<f32> = centers[y]
            .iter()
            .map(|&c| {
                let noise: f64 = rng.sample(StandardNormal);
                (c + config.sigma * noise) as f32
            })
            .collect();
        let observed = draw_class(&mut rng, &config.true_t[y]);
        rows.push(row);
        true_scores.push(y as u8);
        observed_scores.push(observed as u8);
        ids.push(format!("synth-{idx:06}"));
    }
    let embeddings = normalize_rows(EmbeddingMatrix::from_rows(rows, ids)?)?;
    Ok(SynthData {
        embeddings,
        true_scores,
        observed_scores,
    })
}

/// A placeholder corpus aligned with generated embeddings, so synthetic
/// data can flow through the corpus-keyed pipeline stages unchanged.
pub fn synthetic_corpus(data: &SynthData) -> Corpus {
    let samples = data
        .embeddings
        .ids()
        .iter()
        .enumerate()
        .map(|(idx, id)| {
            DataSample::new(
                id.clone(),
                "synthetic",
                format!("synthetic instruction {idx}"),
                "",
                format!("synthetic response {idx}"),
            )
        })
        .collect();
    Corpus::from_samples(samples).expect("synthetic ids are unique")
}

/// Fraction of samples whose k-NN list contains a different true class;
/// the empirical clusterability-violation rate of a generated set.
pub fn clusterability_violation_rate(table: &NeighborTable, true_scores: &[u8]) -> f64 {
    let n = table.len();
    if n == 0 {
        return 0.0;
    }
    let violations = (0..n)
        .filter(|&row| {
            table
                .neighbors_of(row)
                .iter()
                .any(|&nb| true_scores[nb as usize] != true_scores[row])
        })
        .count();
    violations as f64 / n as f64
}

/// Exact consensus statistics: every anchor with every unordered pair of its
/// k neighbour slots, no sampling. Guarded to small N because the tally is
/// O(N * k^2).
pub fn brute_force_consensus(
    scores: &[u8],
    num_classes: usize,
    table: &NeighborTable,
) -> Result<ConsensusStats, SynthError> {
    const LIMIT: usize = 2000;
    if table.len() > LIMIT {
        return Err(SynthError::CostGuard {
            limit: LIMIT,
            got: table.len(),
        });
    }
    crate::knn::validate_scores(scores, table.len(), num_classes)?;
    let k = num_classes;
    let mut v1 = vec![0u64; k];
    let mut v2 = vec![0u64; k * k];
    let mut v3 = vec![0u64; k * k * k];
    let mut tuples = 0u64;
    for anchor in 0..table.len() {
        let nbs = table.neighbors_of(anchor);
        let y1 = scores[anchor] as usize;
        for a in 0..nbs.len() {
            for b in a + 1..nbs.len() {
                let y2 = scores[nbs[a] as usize] as usize;
                let y3 = scores[nbs[b] as usize] as usize;
                let l = (y2 + k - y1) % k;
                let s = (y3 + k - y1) % k;
                v1[y1] += 1;
                v2[l * k + y1] += 1;
                v3[(l * k + s) * k + y1] += 1;
                tuples += 1;
            }
        }
    }
    let norm = |c: Vec<u64>| c.iter().map(|&x| x as f64 / tuples as f64).collect();
    Ok(ConsensusStats {
        num_classes: k,
        v1: norm(v1),
        v2: norm(v2),
        v3: norm(v3),
        tuple_count: tuples,
    })
}

/// Entrywise recovery errors of an estimate against the generating truth,
/// plus detection precision/recall of the corrected set when curation
/// records and true scores are supplied.
#[derive(Debug, Clone, Serialize)]
pub struct RecoveryMetrics {
    pub t_mean_abs: f64,
    pub t_max_abs: f64,
    pub p_mean_abs: f64,
    pub p_max_abs: f64,
    pub detection: Option<DetectionMetrics>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DetectionMetrics {
    /// Samples whose curated score differs from the original.
    pub corrected: usize,
    /// Samples whose observed score differs from the true score.
    pub true_errors: usize,
    pub precision: f64,
    pub recall: f64,
    /// Accuracy of observed scores against truth.
    pub raw_accuracy: f64,
    /// Accuracy of curated scores against truth.
    pub curated_accuracy: f64,
}

pub fn evaluate_recovery(
    true_t: &[Vec<f64>],
    true_p: &[f64],
    estimate: &TransitionEstimate,
    curation: Option<(&[CurationRecord], &[u8])>,
) -> RecoveryMetrics {
    let k = true_p.len();
    let mut t_sum = 0.0;
    let mut t_max = 0.0f64;
    for (est_row, true_row) in estimate.t.iter().zip(true_t) {
        for (est_val, true_val) in est_row.iter().zip(true_row) {
            let err = (est_val - true_val).abs();
            t_sum += err;
            t_max = t_max.max(err);
        }
    }
    let mut p_sum = 0.0;
    let mut p_max = 0.0f64;
    for (est_val, true_val) in estimate.p.iter().zip(true_p) {
        let err = (est_val - true_val).abs();
        p_sum += err;
        p_max = p_max.max(err);
    }

    let detection = curation.map(|(records, true_scores)| {
        assert_eq!(records.len(), true_scores.len(), "records align with truth");
        let mut corrected = 0usize;
        let mut true_errors = 0usize;
        let mut hits = 0usize;
        let mut raw_correct = 0usize;
        let mut curated_correct = 0usize;
        for (record, &truth) in records.iter().zip(true_scores) {
            let is_error = record.original != truth;
            let is_corrected = record.curated != record.original;
            if is_error {
                true_errors += 1;
            }
            if is_corrected {
                corrected += 1;
                if is_error {
                    hits += 1;
                }
            }
            if record.original == truth {
                raw_correct += 1;
            }
            if record.curated == truth {
                curated_correct += 1;
            }
        }
        let n = records.len().max(1);
        DetectionMetrics {
            corrected,
            true_errors,
            precision: if corrected == 0 {
                1.0
            } else {
                hits as f64 / corrected as f64
            },
            recall: if true_errors == 0 {
                1.0
            } else {
                hits as f64 / true_errors as f64
            },
            raw_accuracy: raw_correct as f64 / n as f64,
            curated_accuracy: curated_correct as f64 / n as f64,
        }
    });

    RecoveryMetrics {
        t_mean_abs: t_sum / (k * k) as f64,
        t_max_abs: t_max,
        p_mean_abs: p_sum / k as f64,
        p_max_abs: p_max,
        detection,
    }
}

const TOY_TOPICS: &[&str] = &[
    "the water cycle",
    "binary search",
    "the French Revolution",
    "photosynthesis",
    "compound interest",
    "plate tectonics",
    "sorting networks",
    "the immune system",
    "supply and demand",
    "orbital mechanics",
    "regular expressions",
    "fermentation",
    "music intervals",
    "graph coloring",
    "neural attention",
    "ocean currents",
];

const TOY_VERBS: &[&str] = &[
    "Explain",
    "Summarize",
    "Compare and contrast",
    "List three facts about",
    "Write a short paragraph on",
    "Describe",
];

const TOY_DATASETS: &[(&str, f64)] = &[
    ("flan", 0.33),
    ("oasst", 0.11),
    ("wizardlm", 0.33),
    ("dolly", 0.05),
    ("alpaca", 0.18),
];

/// A small deterministic corpus of templated samples spread over five pool
/// tags, used by the golden-path tests and examples.
pub fn toy_corpus(n: usize, seed: u64) -> Corpus {
    let mut samples = Vec::with_capacity(n);
    for idx in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x70, idx as u64));
        let dataset = {
            let u: f64 = rng.random_range(0.0..1.0);
            let mut acc = 0.0;
            let mut chosen = TOY_DATASETS[0].0;
            for &(name, w) in TOY_DATASETS {
                acc += w;
                if u < acc {
                    chosen = name;
                    break;
                }
            }
            chosen
        };
        let verb = TOY_VERBS[rng.random_range(0..TOY_VERBS.len())];
        let topic = TOY_TOPICS[rng.random_range(0..TOY_TOPICS.len())];
        let detail = TOY_TOPICS[rng.random_range(0..TOY_TOPICS.len())];
        let sentences = rng.random_range(1..5);
        let response: String = (0..sentences)
            .map(|s| format!("Fact {n} about {topic}: it relates to {detail} in way {s}.", n = s + 1))
            .collect::<Vec<_>>()
            .join(" ");
        let input = if rng.random_range(0.0..1.0) < 0.25 {
            format!("Context: consider {detail}.")
        } else {
            String::new()
        };
        samples.push(DataSample::new(
            format!("{dataset}-{idx:05}"),
            dataset,
            format!("{verb} {topic}."),
            input,
            response,
        ));
    }
    Corpus::from_samples(samples).expect("toy ids are unique")
}
