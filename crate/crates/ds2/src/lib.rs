//! `ds2` rates instruction-tuning samples with an LLM judge, models the error
//! pattern of those ratings with a score transition matrix estimated from
//! k-NN consensus statistics, curates the scores, and selects a compact,
//! diverse, high-quality subset of the data pool.
//!
//! The crate is organised as a library first; the `ds2` binary is a thin
//! wrapper over [`pipeline`]. Each stage is usable on its own:
//!
//! - [`corpus`] — JSONL ingestion and the canonical `(instruction, input,
//!   response)` sample model, plus the Tulu chat rendering.
//! - [`rater`] — prompt construction, rating parsing, the 1–10 → 0–5
//!   rescaling, and the cached, retrying rating loop.
//! - [`embedding`] — embedding ingestion/fetching and row normalisation.
//! - [`knn`] — exact cosine k-nearest-neighbour tables and soft neighbour
//!   score distributions.
//! - [`consensus`] — consensus statistics over neighbour tuples and the
//!   `(T, p)` transition-matrix / prior estimator.
//! - [`curation`] — misrated-sample detection, confidence-gated score
//!   correction, and curation reports.
//! - [`diversity`] — long-tail diversity scores from neighbour similarities.
//! - [`selector`] — final subset selection plus model-free baselines.
//! - [`synthlab`] — synthetic corpora with known ground truth and the
//!   brute-force oracles used by the test suite.
//! - [`pipeline`] — config, artifact/cache management, and stage orchestration
//!   behind the CLI.
//!
//! See the `examples/` directory for one runnable walkthrough per capability.

pub mod client;
pub mod consensus;
pub mod corpus;
pub mod curation;
pub mod diversity;
pub mod embedding;
pub mod knn;
pub mod pipeline;
pub mod rater;
pub mod selector;
pub mod synthlab;

mod util;

/// Number of score classes on the rated 0–5 scale.
pub const NUM_SCORE_CLASSES: usize = 6;

pub use corpus::{Corpus, DataSample};
pub use rater::{RatedScore, RawRating};
