//! Pipeline orchestration: a single JSON config drives the staged flow
//! (rate, embed, knn, estimate, curate, diversity, select, simulate,
//! report). Every artifact carries a sidecar recording the content hashes
//! of its inputs, so unchanged reruns are cache hits and stale upstream
//! artifacts are detected instead of silently reused.

mod report;

pub use report::ReportBundle;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{chat_backend, embed_backend, EndpointConfig};
use crate::consensus::{
    count_consensus, solve_transition, ConsensusStats, SolveOptions, TransitionEstimate,
};
use crate::corpus::{load_corpus, Corpus, CorpusFormat};
use crate::curation::{curate, curation_report, CurationOptions, CurationRecord};
use crate::diversity::long_tail_scores;
use crate::embedding::{load_embeddings, normalize_rows, save_embeddings};
use crate::knn::{build_neighbor_table_blocked, load_neighbor_table, save_neighbor_table};
use crate::rater::{load_scores, rate_corpus, save_scores, RaterOptions, ScoreRow};
use crate::selector::{
    dataset_proportions, save_selection, select_baseline, select_ds2, select_ds2_no_curation,
    SelectionResult, Strategy,
};
use crate::synthlab::{clusterability_violation_rate, generate, synthetic_corpus, SynthConfig};
use crate::util::{derive_seed, sha256_hex};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("missing artifact `{artifact}`: run the `{stage}` stage first")]
    MissingArtifact { artifact: String, stage: String },
    #[error("artifact `{artifact}` is stale (its inputs changed): re-run the `{stage}` stage")]
    StaleArtifact { artifact: String, stage: String },
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    Rater(#[from] crate::rater::RaterError),
    #[error(transparent)]
    Client(#[from] crate::client::ClientError),
    #[error(transparent)]
    Embedding(#[from] crate::embedding::EmbeddingError),
    #[error(transparent)]
    Knn(#[from] crate::knn::KnnError),
    #[error(transparent)]
    Consensus(#[from] crate::consensus::ConsensusError),
    #[error(transparent)]
    Curation(#[from] crate::curation::CurationError),
    #[error(transparent)]
    Diversity(#[from] crate::diversity::DiversityError),
    #[error(transparent)]
    Selector(#[from] crate::selector::SelectorError),
    #[error(transparent)]
    Synth(#[from] crate::synthlab::SynthError),
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Rate,
    Embed,
    Knn,
    Estimate,
    Curate,
    Diversity,
    Select,
    Simulate,
    Report,
    All,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Rate => "rate",
            Stage::Embed => "embed",
            Stage::Knn => "knn",
            Stage::Estimate => "estimate",
            Stage::Curate => "curate",
            Stage::Diversity => "diversity",
            Stage::Select => "select",
            Stage::Simulate => "simulate",
            Stage::Report => "report",
            Stage::All => "all",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub corpus: PathBuf,
    pub corpus_format: CorpusFormat,
    pub workdir: PathBuf,
    /// Externally supplied scores file; skips the rate stage entirely.
    pub scores: Option<PathBuf>,
    /// Externally supplied embeddings file; skips the embed stage.
    pub embeddings: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            corpus: PathBuf::from("corpus.jsonl"),
            corpus_format: CorpusFormat::Flat,
            workdir: PathBuf::from("ds2-work"),
            scores: None,
            embeddings: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RaterStageConfig {
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub concurrency: usize,
    pub max_retries: u32,
    pub reparse_attempts: u32,
    pub requests_per_second: Option<f64>,
    pub timeout_secs: u64,
}

impl Default for RaterStageConfig {
    fn default() -> Self {
        RaterStageConfig {
            base_url: String::new(),
            model: String::new(),
            api_key: None,
            concurrency: 4,
            max_retries: 3,
            reparse_attempts: 2,
            requests_per_second: None,
            timeout_secs: 120,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingStageConfig {
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub batch_size: usize,
    pub max_retries: u32,
    pub timeout_secs: u64,
}

impl Default for EmbeddingStageConfig {
    fn default() -> Self {
        EmbeddingStageConfig {
            base_url: String::new(),
            model: String::new(),
            api_key: None,
            batch_size: 32,
            max_retries: 3,
            timeout_secs: 120,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct KnnStageConfig {
    pub k: usize,
    pub block_size: usize,
}

impl Default for KnnStageConfig {
    fn default() -> Self {
        KnnStageConfig {
            k: 10,
            block_size: 1024,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsensusStageConfig {
    pub rounds: u64,
    pub restarts: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub learning_rate: f64,
}

impl Default for ConsensusStageConfig {
    fn default() -> Self {
        ConsensusStageConfig {
            rounds: 3,
            restarts: 10,
            max_iters: 1500,
            tol: 1e-8,
            learning_rate: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CurationStageConfig {
    pub epochs: usize,
    /// Neighbour subset size per epoch; defaults to k - 2.
    pub subset_size: Option<usize>,
    pub confidence_threshold: f64,
    /// Re-estimate the transition matrix on curated scores for the report.
    pub reestimate: bool,
}

impl Default for CurationStageConfig {
    fn default() -> Self {
        CurationStageConfig {
            epochs: 5,
            subset_size: None,
            confidence_threshold: 0.4,
            reestimate: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct DiversityStageConfig {
    /// Neighbours used for the long-tail score; defaults to k.
    pub k_div: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionStageConfig {
    pub target_size: usize,
    pub strategy: Strategy,
}

impl Default for SelectionStageConfig {
    fn default() -> Self {
        SelectionStageConfig {
            target_size: 1000,
            strategy: Strategy::Ds2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateStageConfig {
    pub n: usize,
    pub num_classes: usize,
    pub dim: usize,
    pub sigma: f64,
    pub center_separation: f64,
    /// Uniform off-diagonal noise level of the injected transition matrix.
    pub noise: f64,
}

impl Default for SimulateStageConfig {
    fn default() -> Self {
        SimulateStageConfig {
            n: 20_000,
            num_classes: 6,
            dim: 32,
            sigma: 0.05,
            center_separation: 0.5,
            noise: 0.3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ReportStageConfig {
    /// A second scores file for the rating-overlap cross-tab.
    pub compare_scores: Option<PathBuf>,
}

fn default_seed() -> u64 {
    42
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub paths: PathsConfig,
    pub rater: RaterStageConfig,
    pub embedding: EmbeddingStageConfig,
    pub knn: KnnStageConfig,
    pub consensus: ConsensusStageConfig,
    pub curation: CurationStageConfig,
    pub diversity: DiversityStageConfig,
    pub selection: SelectionStageConfig,
    pub simulate: SimulateStageConfig,
    pub report: ReportStageConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: default_seed(),
            paths: PathsConfig::default(),
            rater: RaterStageConfig::default(),
            embedding: EmbeddingStageConfig::default(),
            knn: KnnStageConfig::default(),
            consensus: ConsensusStageConfig::default(),
            curation: CurationStageConfig::default(),
            diversity: DiversityStageConfig::default(),
            selection: SelectionStageConfig::default(),
            simulate: SimulateStageConfig::default(),
            report: ReportStageConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }
}

/// Artifact sidecar: hashes of the direct inputs plus the stage config, so
/// freshness is decidable without re-running anything.
#[derive(Debug, Serialize, Deserialize)]
struct ArtifactMeta {
    stage: String,
    inputs: BTreeMap<String, String>,
    config_hash: String,
    seed: u64,
}

pub struct Pipeline {
    config: PipelineConfig,
    base: PathBuf,
}

impl Pipeline {
    /// Relative paths in the config resolve against the config file's
    /// directory.
    pub fn load(config_path: &Path) -> Result<Self, PipelineError> {
        let config = PipelineConfig::from_file(config_path)?;
        let base = config_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(Pipeline { config, base })
    }

    pub fn from_config(config: PipelineConfig, base: PathBuf) -> Self {
        Pipeline { config, base }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut PipelineConfig {
        &mut self.config
    }

    fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base.join(path)
        }
    }

    pub fn workdir(&self) -> PathBuf {
        self.resolve(&self.config.paths.workdir)
    }

    fn corpus_path(&self) -> PathBuf {
        self.resolve(&self.config.paths.corpus)
    }

    fn scores_path(&self) -> PathBuf {
        match &self.config.paths.scores {
            Some(path) => self.resolve(path),
            None => self.workdir().join("scores.jsonl"),
        }
    }

    fn embeddings_path(&self) -> PathBuf {
        match &self.config.paths.embeddings {
            Some(path) => self.resolve(path),
            None => self.workdir().join("embeddings.ds2e"),
        }
    }

    fn neighbors_path(&self) -> PathBuf {
        self.workdir().join("neighbors.ds2k")
    }

    fn transition_path(&self) -> PathBuf {
        self.workdir().join("transition.json")
    }

    fn curated_path(&self) -> PathBuf {
        self.workdir().join("curated.jsonl")
    }

    fn diversity_path(&self) -> PathBuf {
        self.workdir().join("diversity.jsonl")
    }

    fn selected_path(&self) -> PathBuf {
        self.workdir().join("selected.jsonl")
    }

    pub fn run(&self, stage: Stage) -> Result<(), PipelineError> {
        fs::create_dir_all(self.workdir()).map_err(|source| PipelineError::Io {
            path: self.workdir().display().to_string(),
            source,
        })?;
        match stage {
            Stage::Rate => self.stage_rate(),
            Stage::Embed => self.stage_embed(),
            Stage::Knn => self.stage_knn(),
            Stage::Estimate => self.stage_estimate(),
            Stage::Curate => self.stage_curate(),
            Stage::Diversity => self.stage_diversity(),
            Stage::Select => self.stage_select(),
            Stage::Simulate => self.stage_simulate(),
            Stage::Report => self.stage_report(),
            Stage::All => {
                if self.config.paths.scores.is_none() {
                    self.stage_rate()?;
                }
                if self.config.paths.embeddings.is_none() {
                    self.stage_embed()?;
                }
                self.stage_knn()?;
                self.stage_estimate()?;
                self.stage_curate()?;
                self.stage_diversity()?;
                self.stage_select()?;
                self.stage_report()
            }
        }
    }

    // ---- artifact bookkeeping ----

    fn hash_file(path: &Path) -> Result<String, PipelineError> {
        let bytes = fs::read(path).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(sha256_hex(&bytes))
    }

    fn meta_path(artifact: &Path) -> PathBuf {
        let mut name = artifact
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        name.push_str(".meta.json");
        artifact.with_file_name(name)
    }

    fn config_hash<T: Serialize>(&self, section: &T) -> String {
        let body = serde_json::to_string(section).expect("config serialisation cannot fail");
        sha256_hex(format!("{}\u{1f}{}", self.config.seed, body).as_bytes())
    }

    fn collect_input_hashes(
        inputs: &[&Path],
    ) -> Result<BTreeMap<String, String>, PipelineError> {
        let mut map = BTreeMap::new();
        for path in inputs {
            map.insert(path.display().to_string(), Self::hash_file(path)?);
        }
        Ok(map)
    }

    /// True when the artifact exists and its sidecar matches the current
    /// inputs and config.
    fn is_fresh(
        &self,
        artifact: &Path,
        inputs: &[&Path],
        config_hash: &str,
    ) -> Result<bool, PipelineError> {
        if !artifact.exists() {
            return Ok(false);
        }
        let meta_path = Self::meta_path(artifact);
        if !meta_path.exists() {
            return Ok(false);
        }
        let text = fs::read_to_string(&meta_path).map_err(|source| PipelineError::Io {
            path: meta_path.display().to_string(),
            source,
        })?;
        let meta: ArtifactMeta = match serde_json::from_str(&text) {
            Ok(meta) => meta,
            Err(_) => return Ok(false),
        };
        if meta.config_hash != config_hash || meta.seed != self.config.seed {
            return Ok(false);
        }
        for path in inputs {
            if !path.exists() {
                return Ok(false);
            }
            let current = Self::hash_file(path)?;
            match meta.inputs.get(&path.display().to_string()) {
                Some(recorded) if *recorded == current => {}
                _ => return Ok(false),
            }
        }
        Ok(true)
    }

    fn write_meta(
        &self,
        artifact: &Path,
        stage: Stage,
        inputs: &[&Path],
        config_hash: String,
    ) -> Result<(), PipelineError> {
        let meta = ArtifactMeta {
            stage: stage.name().to_string(),
            inputs: Self::collect_input_hashes(inputs)?,
            config_hash,
            seed: self.config.seed,
        };
        let meta_path = Self::meta_path(artifact);
        fs::write(
            &meta_path,
            serde_json::to_string_pretty(&meta).expect("meta serialisation cannot fail"),
        )
        .map_err(|source| PipelineError::Io {
            path: meta_path.display().to_string(),
            source,
        })
    }

    /// Check that an upstream artifact exists and, when it carries a
    /// sidecar, that its recorded inputs are unchanged.
    fn require_artifact(&self, artifact: &Path, producer: Stage) -> Result<(), PipelineError> {
        if !artifact.exists() {
            return Err(PipelineError::MissingArtifact {
                artifact: artifact.display().to_string(),
                stage: producer.name().to_string(),
            });
        }
        let meta_path = Self::meta_path(artifact);
        if !meta_path.exists() {
            // Externally supplied files have no sidecar; trust them.
            return Ok(());
        }
        let text = fs::read_to_string(&meta_path).map_err(|source| PipelineError::Io {
            path: meta_path.display().to_string(),
            source,
        })?;
        let meta: ArtifactMeta = match serde_json::from_str(&text) {
            Ok(meta) => meta,
            Err(_) => return Ok(()),
        };
        for (recorded_path, recorded_hash) in &meta.inputs {
            let path = PathBuf::from(recorded_path);
            if !path.exists() || Self::hash_file(&path)? != *recorded_hash {
                return Err(PipelineError::StaleArtifact {
                    artifact: artifact.display().to_string(),
                    stage: meta.stage.clone(),
                });
            }
        }
        Ok(())
    }

    fn load_corpus(&self) -> Result<Corpus, PipelineError> {
        let path = self.corpus_path();
        if !path.exists() {
            return Err(PipelineError::MissingArtifact {
                artifact: path.display().to_string(),
                stage: "simulate (or supply paths.corpus)".to_string(),
            });
        }
        Ok(load_corpus(&path, self.config.paths.corpus_format)?)
    }

    // ---- stages ----

    fn stage_rate(&self) -> Result<(), PipelineError> {
        if let Some(external) = &self.config.paths.scores {
            println!(
                "[rate] using externally supplied scores at {}",
                self.resolve(external).display()
            );
            return Ok(());
        }
        let corpus_path = self.corpus_path();
        let out = self.scores_path();
        // Env overrides for base_url/model participate in the freshness
        // hash so switching models invalidates the scores artifact.
        let mut endpoint = EndpointConfig {
            base_url: self.config.rater.base_url.clone(),
            model: self.config.rater.model.clone(),
            api_key: self.config.rater.api_key.clone(),
            max_retries: self.config.rater.max_retries,
            timeout_secs: self.config.rater.timeout_secs,
            requests_per_second: self.config.rater.requests_per_second,
        };
        endpoint.apply_env(true);
        let config_hash = self.config_hash(&(
            &self.config.rater,
            &endpoint.base_url,
            &endpoint.model,
        ));
        self.load_corpus().and_then(|corpus| {
            if self.is_fresh(&out, &[&corpus_path], &config_hash)? {
                println!("[rate] cache hit: {}", out.display());
                return Ok(());
            }
            if endpoint.base_url.is_empty() {
                return Err(PipelineError::Config(
                    "rater.base_url is empty: set it (or DS2_API_BASE), or supply paths.scores"
                        .into(),
                ));
            }
            let backend = chat_backend(&endpoint)?;
            let outcome = rate_corpus(
                &corpus,
                backend.as_ref(),
                &endpoint.model,
                &self.workdir().join("rate_cache.jsonl"),
                &RaterOptions {
                    concurrency: self.config.rater.concurrency,
                    reparse_attempts: self.config.rater.reparse_attempts,
                },
            )?;
            save_scores(&outcome.rows, &out)?;
            self.write_meta(&out, Stage::Rate, &[&corpus_path], config_hash)?;
            let summary = serde_json::json!({
                "model": endpoint.model,
                "samples": outcome.rows.len(),
                "requests": outcome.requests,
                "cache_hits": outcome.cache_hits,
                "clamped": outcome.clamped,
                "unrated": outcome.unrated,
                "seed": self.config.seed,
            });
            write_json(&self.workdir().join("rate_report.json"), &summary)?;
            println!(
                "[rate] {} samples ({} requests, {} cache hits, {} unrated) -> {}",
                outcome.rows.len(),
                outcome.requests,
                outcome.cache_hits,
                outcome.unrated,
                out.display()
            );
            Ok(())
        })
    }

    fn stage_embed(&self) -> Result<(), PipelineError> {
        if let Some(external) = &self.config.paths.embeddings {
            println!(
                "[embed] using externally supplied embeddings at {}",
                self.resolve(external).display()
            );
            return Ok(());
        }
        let corpus_path = self.corpus_path();
        let out = self.embeddings_path();
        let mut endpoint = EndpointConfig {
            base_url: self.config.embedding.base_url.clone(),
            model: self.config.embedding.model.clone(),
            api_key: self.config.embedding.api_key.clone(),
            max_retries: self.config.embedding.max_retries,
            timeout_secs: self.config.embedding.timeout_secs,
            requests_per_second: None,
        };
        endpoint.apply_env(false);
        let config_hash = self.config_hash(&(
            &self.config.embedding,
            &endpoint.base_url,
            &endpoint.model,
        ));
        let corpus = self.load_corpus()?;
        if self.is_fresh(&out, &[&corpus_path], &config_hash)? {
            println!("[embed] cache hit: {}", out.display());
            return Ok(());
        }
        if endpoint.base_url.is_empty() {
            return Err(PipelineError::Config(
                "embedding.base_url is empty: set it (or DS2_API_BASE), or supply paths.embeddings"
                    .into(),
            ));
        }
        let backend = embed_backend(&endpoint)?;
        let matrix = crate::embedding::embed_corpus(
            &corpus,
            backend.as_ref(),
            &endpoint.model,
            &self.workdir().join("embed_cache.jsonl"),
            self.config.embedding.batch_size,
        )?;
        let matrix = normalize_rows(matrix)?;
        save_embeddings(&matrix, &out)?;
        self.write_meta(&out, Stage::Embed, &[&corpus_path], config_hash)?;
        println!(
            "[embed] {} x {} embeddings -> {}",
            matrix.len(),
            matrix.dim(),
            out.display()
        );
        Ok(())
    }

    fn stage_knn(&self) -> Result<(), PipelineError> {
        let corpus_path = self.corpus_path();
        let emb_path = self.embeddings_path();
        self.require_artifact(&emb_path, Stage::Embed)?;
        let out = self.neighbors_path();
        let config_hash = self.config_hash(&self.config.knn);
        if self.is_fresh(&out, &[&emb_path, &corpus_path], &config_hash)? {
            println!("[knn] cache hit: {}", out.display());
            return Ok(());
        }
        let corpus = self.load_corpus()?;
        let matrix = load_embeddings(&emb_path, &corpus)?;
        let matrix = normalize_rows(matrix)?;
        let table = build_neighbor_table_blocked(
            &matrix,
            self.config.knn.k,
            self.config.knn.block_size,
        )?;
        save_neighbor_table(&table, &out)?;
        self.write_meta(&out, Stage::Knn, &[&emb_path, &corpus_path], config_hash)?;
        println!(
            "[knn] exact {}-NN table over {} rows -> {}",
            table.k(),
            table.len(),
            out.display()
        );
        Ok(())
    }

    fn scores_as_classes(&self, rows: &[ScoreRow], corpus: &Corpus) -> Result<Vec<u8>, PipelineError> {
        if rows.len() != corpus.len() {
            return Err(PipelineError::Other(format!(
                "scores file has {} rows but corpus has {} samples",
                rows.len(),
                corpus.len()
            )));
        }
        for (row, sample) in rows.iter().zip(corpus.iter()) {
            if row.id != sample.id {
                return Err(PipelineError::Other(format!(
                    "scores id `{}` does not match corpus id `{}`; files must align by order",
                    row.id, sample.id
                )));
            }
        }
        // Unrated rows carry score 0 and are treated as the lowest class.
        Ok(rows.iter().map(|r| r.score).collect())
    }

    fn stage_estimate(&self) -> Result<(), PipelineError> {
        let scores_path = self.scores_path();
        let neighbors_path = self.neighbors_path();
        self.require_artifact(&scores_path, Stage::Rate)?;
        self.require_artifact(&neighbors_path, Stage::Knn)?;
        let out = self.transition_path();
        let config_hash = self.config_hash(&self.config.consensus);
        if self.is_fresh(&out, &[&scores_path, &neighbors_path], &config_hash)? {
            println!("[estimate] cache hit: {}", out.display());
            return Ok(());
        }
        let corpus = self.load_corpus()?;
        let rows = load_scores(&scores_path)?;
        let classes = self.scores_as_classes(&rows, &corpus)?;
        let table = load_neighbor_table(&neighbors_path)?;
        let stats = count_consensus(
            &table,
            &classes,
            crate::NUM_SCORE_CLASSES,
            self.config.consensus.rounds,
            derive_seed(self.config.seed, 0xc0, 0),
        )?;
        let estimate = solve_transition(&stats, &self.solve_options())?;
        self.write_transition(&out, &estimate, &stats)?;
        self.write_meta(
            &out,
            Stage::Estimate,
            &[&scores_path, &neighbors_path],
            config_hash,
        )?;
        report::write_transition_csv(
            &self.workdir().join("transition_heatmap.csv"),
            &estimate.t,
        )
        .map_err(|source| PipelineError::Io {
            path: "transition_heatmap.csv".into(),
            source,
        })?;
        println!(
            "[estimate] residual {:.3e} (restart {}, converged: {}) -> {}",
            estimate.residual,
            estimate.restart,
            estimate.converged,
            out.display()
        );
        Ok(())
    }

    fn solve_options(&self) -> SolveOptions {
        SolveOptions {
            restarts: self.config.consensus.restarts,
            max_iters: self.config.consensus.max_iters,
            tol: self.config.consensus.tol,
            learning_rate: self.config.consensus.learning_rate,
            seed: derive_seed(self.config.seed, 0x50, 0),
        }
    }

    fn write_transition(
        &self,
        path: &Path,
        estimate: &TransitionEstimate,
        stats: &ConsensusStats,
    ) -> Result<(), PipelineError> {
        let body = serde_json::json!({
            "T": estimate.t,
            "p": estimate.p,
            "residual": estimate.residual,
            "tuple_count": stats.tuple_count,
            "seed": self.config.seed,
            "config": self.config.consensus,
            "converged": estimate.converged,
            "restart": estimate.restart,
        });
        write_json(path, &body)
    }

    fn read_transition(&self, path: &Path) -> Result<TransitionEstimate, PipelineError> {
        #[derive(Deserialize)]
        struct Stored {
            #[serde(rename = "T")]
            t: Vec<Vec<f64>>,
            p: Vec<f64>,
            residual: f64,
            #[serde(default)]
            converged: bool,
            #[serde(default)]
            restart: usize,
        }
        let text = fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let stored: Stored = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Other(format!("{}: {e}", path.display())))?;
        Ok(TransitionEstimate {
            t: stored.t,
            p: stored.p,
            residual: stored.residual,
            converged: stored.converged,
            restart: stored.restart,
        })
    }

    fn stage_curate(&self) -> Result<(), PipelineError> {
        let scores_path = self.scores_path();
        let neighbors_path = self.neighbors_path();
        let transition_path = self.transition_path();
        self.require_artifact(&scores_path, Stage::Rate)?;
        self.require_artifact(&neighbors_path, Stage::Knn)?;
        self.require_artifact(&transition_path, Stage::Estimate)?;
        let out = self.curated_path();
        let config_hash = self.config_hash(&self.config.curation);
        let inputs: [&Path; 3] = [&scores_path, &neighbors_path, &transition_path];
        if self.is_fresh(&out, &inputs, &config_hash)? {
            println!("[curate] cache hit: {}", out.display());
            return Ok(());
        }
        let corpus = self.load_corpus()?;
        let rows = load_scores(&scores_path)?;
        let classes = self.scores_as_classes(&rows, &corpus)?;
        let table = load_neighbor_table(&neighbors_path)?;
        let estimate = self.read_transition(&transition_path)?;
        let ids: Vec<String> = corpus.ids().map(str::to_string).collect();
        let subset_size = self
            .config
            .curation
            .subset_size
            .unwrap_or_else(|| table.k().saturating_sub(2).max(1));
        let records = curate(
            &table,
            &classes,
            &ids,
            &estimate,
            &CurationOptions {
                epochs: self.config.curation.epochs,
                subset_size,
                confidence_threshold: self.config.curation.confidence_threshold,
                seed: derive_seed(self.config.seed, 0xc2, 0),
            },
        )?;
        crate::curation::save_curated(&records, &out)?;
        self.write_meta(&out, Stage::Curate, &inputs, config_hash)?;

        let summary = curation_report(&records, crate::NUM_SCORE_CLASSES);
        let reestimated = if self.config.curation.reestimate {
            let curated_classes: Vec<u8> = records.iter().map(|r| r.curated).collect();
            let stats = count_consensus(
                &table,
                &curated_classes,
                crate::NUM_SCORE_CLASSES,
                self.config.consensus.rounds,
                derive_seed(self.config.seed, 0xc1, 0),
            )?;
            Some(solve_transition(&stats, &self.solve_options())?)
        } else {
            None
        };
        let report_body = serde_json::json!({
            "before": summary.before,
            "after": summary.after,
            "movement": summary.movement,
            "corrected": summary.corrected,
            "flagged": summary.flagged,
            "subset_size": subset_size,
            "epochs": self.config.curation.epochs,
            "confidence_threshold": self.config.curation.confidence_threshold,
            "seed": self.config.seed,
            "reestimated_transition": reestimated.as_ref().map(|e| serde_json::json!({
                "T": e.t, "p": e.p, "residual": e.residual,
            })),
        });
        write_json(&self.workdir().join("curation_report.json"), &report_body)?;
        println!(
            "[curate] {} corrected of {} ({} flagged) -> {}",
            summary.corrected,
            records.len(),
            summary.flagged,
            out.display()
        );
        Ok(())
    }

    fn stage_diversity(&self) -> Result<(), PipelineError> {
        let neighbors_path = self.neighbors_path();
        self.require_artifact(&neighbors_path, Stage::Knn)?;
        let out = self.diversity_path();
        let config_hash = self.config_hash(&self.config.diversity);
        if self.is_fresh(&out, &[&neighbors_path], &config_hash)? {
            println!("[diversity] cache hit: {}", out.display());
            return Ok(());
        }
        let corpus = self.load_corpus()?;
        let table = load_neighbor_table(&neighbors_path)?;
        let k_div = self.config.diversity.k_div.unwrap_or(table.k());
        let scores = long_tail_scores(&table, k_div)?;
        let ids: Vec<String> = corpus.ids().map(str::to_string).collect();
        crate::diversity::save_diversity(&scores, &ids, &out)?;
        self.write_meta(&out, Stage::Diversity, &[&neighbors_path], config_hash)?;
        println!(
            "[diversity] long-tail scores (k_div={k_div}) -> {}",
            out.display()
        );
        Ok(())
    }

    fn stage_select(&self) -> Result<(), PipelineError> {
        let out = self.selected_path();
        let config_hash = self.config_hash(&self.config.selection);
        let corpus = self.load_corpus()?;

        let result: SelectionResult = match self.config.selection.strategy {
            Strategy::Ds2 | Strategy::Ds2NoCuration => {
                let curated_path = self.curated_path();
                let diversity_path = self.diversity_path();
                self.require_artifact(&curated_path, Stage::Curate)?;
                self.require_artifact(&diversity_path, Stage::Diversity)?;
                let inputs: [&Path; 2] = [&curated_path, &diversity_path];
                if self.is_fresh(&out, &inputs, &config_hash)? {
                    println!("[select] cache hit: {}", out.display());
                    return Ok(());
                }
                let records = self.load_curated_records(&curated_path, &corpus)?;
                let diversity = self.load_diversity_scores(&diversity_path, &corpus)?;
                let select = match self.config.selection.strategy {
                    Strategy::Ds2 => select_ds2,
                    _ => select_ds2_no_curation,
                };
                let result = select(
                    &records,
                    &diversity,
                    &corpus,
                    self.config.selection.target_size,
                )?;
                save_selection(&result, &corpus, &out)?;
                self.write_meta(&out, Stage::Select, &inputs, config_hash)?;
                result
            }
            Strategy::KnnDistance => {
                let diversity_path = self.diversity_path();
                self.require_artifact(&diversity_path, Stage::Diversity)?;
                let inputs: [&Path; 1] = [&diversity_path];
                if self.is_fresh(&out, &inputs, &config_hash)? {
                    println!("[select] cache hit: {}", out.display());
                    return Ok(());
                }
                let diversity = self.load_diversity_scores(&diversity_path, &corpus)?;
                let result = select_baseline(
                    &corpus,
                    Some(&diversity),
                    Strategy::KnnDistance,
                    self.config.selection.target_size,
                    derive_seed(self.config.seed, 0x5e, 0),
                )?;
                save_selection(&result, &corpus, &out)?;
                self.write_meta(&out, Stage::Select, &inputs, config_hash)?;
                result
            }
            strategy => {
                let corpus_path = self.corpus_path();
                let inputs: [&Path; 1] = [&corpus_path];
                if self.is_fresh(&out, &inputs, &config_hash)? {
                    println!("[select] cache hit: {}", out.display());
                    return Ok(());
                }
                let result = select_baseline(
                    &corpus,
                    None,
                    strategy,
                    self.config.selection.target_size,
                    derive_seed(self.config.seed, 0x5e, 0),
                )?;
                save_selection(&result, &corpus, &out)?;
                self.write_meta(&out, Stage::Select, &inputs, config_hash)?;
                result
            }
        };

        if result.entries.len() < result.requested {
            println!(
                "[select] warning: requested {} but pool only has {} samples",
                result.requested,
                result.entries.len()
            );
        }
        let proportions = dataset_proportions(&result);
        let report_body = serde_json::json!({
            "strategy": self.config.selection.strategy,
            "target_size": self.config.selection.target_size,
            "selected": result.entries.len(),
            "seed": self.config.seed,
            "dataset_proportions": proportions
                .iter()
                .map(|(name, count, share)| serde_json::json!({
                    "dataset": name, "count": count, "share": share,
                }))
                .collect::<Vec<_>>(),
        });
        write_json(&self.workdir().join("selection_report.json"), &report_body)?;
        println!(
            "[select] {} samples ({:?}) -> {}",
            result.entries.len(),
            self.config.selection.strategy,
            out.display()
        );
        Ok(())
    }

    fn load_curated_records(
        &self,
        path: &Path,
        corpus: &Corpus,
    ) -> Result<Vec<CurationRecord>, PipelineError> {
        let rows = crate::curation::load_curated(path)?;
        if rows.len() != corpus.len() {
            return Err(PipelineError::Other(format!(
                "curated file has {} rows but corpus has {}",
                rows.len(),
                corpus.len()
            )));
        }
        Ok(rows
            .into_iter()
            .map(|row| CurationRecord {
                id: row.id,
                original: row.original,
                agreement: row.agreement,
                flagged: row.flagged,
                candidate: row.curated,
                flag_rate: 0.0,
                candidate_dist: Vec::new(),
                confidence: row.confidence,
                curated: row.curated,
            })
            .collect())
    }

    fn load_diversity_scores(
        &self,
        path: &Path,
        corpus: &Corpus,
    ) -> Result<crate::diversity::DiversityScores, PipelineError> {
        let rows = crate::diversity::load_diversity(path)?;
        if rows.len() != corpus.len() {
            return Err(PipelineError::Other(format!(
                "diversity file has {} rows but corpus has {}",
                rows.len(),
                corpus.len()
            )));
        }
        Ok(crate::diversity::DiversityScores {
            values: rows.into_iter().map(|(_, value)| value).collect(),
        })
    }

    fn stage_simulate(&self) -> Result<(), PipelineError> {
        let sim = &self.config.simulate;
        let config = SynthConfig {
            n: sim.n,
            num_classes: sim.num_classes,
            dim: sim.dim,
            sigma: sim.sigma,
            center_separation: sim.center_separation,
            true_p: vec![1.0 / sim.num_classes as f64; sim.num_classes],
            true_t: SynthConfig::uniform_noise(1, sim.num_classes, 1, 0.0, sim.noise, 0).true_t,
            seed: derive_seed(self.config.seed, 0x51, 0),
        };
        let data = generate(&config)?;
        let corpus = synthetic_corpus(&data);

        let corpus_out = self.workdir().join("synth_corpus.jsonl");
        crate::corpus::save_corpus(&corpus, &corpus_out)?;
        let emb_out = self.workdir().join("embeddings.ds2e");
        save_embeddings(&data.embeddings, &emb_out)?;
        let scores_out = self.workdir().join("scores.jsonl");
        let rows: Vec<ScoreRow> = corpus
            .iter()
            .zip(&data.observed_scores)
            .map(|(sample, &score)| ScoreRow {
                id: sample.id.clone(),
                rarity: None,
                complexity: None,
                informativeness: None,
                overall: None,
                score,
                status: crate::rater::ScoreStatus::Rated,
            })
            .collect();
        save_scores(&rows, &scores_out)?;

        // Certify clusterability rather than assuming it.
        let table = build_neighbor_table_blocked(
            &data.embeddings,
            self.config.knn.k.min(data.embeddings.len().saturating_sub(1)),
            self.config.knn.block_size,
        )?;
        let violation_rate = clusterability_violation_rate(&table, &data.true_scores);

        let truth = serde_json::json!({
            "true_t": config.true_t,
            "true_p": config.true_p,
            "true_scores": data.true_scores,
            "clusterability_violation_rate": violation_rate,
            "seed": self.config.seed,
            "config": sim,
        });
        write_json(&self.workdir().join("truth.json"), &truth)?;
        self.write_meta(&corpus_out, Stage::Simulate, &[], self.config_hash(sim))?;
        self.write_meta(&emb_out, Stage::Simulate, &[&corpus_out], self.config_hash(sim))?;
        self.write_meta(&scores_out, Stage::Simulate, &[&corpus_out], self.config_hash(sim))?;
        println!(
            "[simulate] {} samples, violation rate {:.4} -> {}",
            sim.n,
            violation_rate,
            self.workdir().display()
        );
        println!(
            "[simulate] point paths.corpus at {} to run the pipeline on it",
            corpus_out.display()
        );
        Ok(())
    }

    fn stage_report(&self) -> Result<(), PipelineError> {
        let bundle = report::build(self)?;
        let dir = self.workdir().join("report");
        bundle.write(&dir).map_err(|source| PipelineError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        println!("[report] bundle -> {}", dir.display());
        Ok(())
    }

    pub(crate) fn report_inputs(
        &self,
    ) -> Result<report::ReportInputs, PipelineError> {
        let corpus = self.load_corpus()?;
        let scores_path = self.scores_path();
        self.require_artifact(&scores_path, Stage::Rate)?;
        let raw = load_scores(&scores_path)?;
        let curated_path = self.curated_path();
        let curated = if curated_path.exists() {
            Some(crate::curation::load_curated(&curated_path)?)
        } else {
            None
        };
        let transition = if self.transition_path().exists() {
            Some(self.read_transition(&self.transition_path())?)
        } else {
            None
        };
        let diversity = if self.diversity_path().exists() {
            Some(crate::diversity::load_diversity(&self.diversity_path())?)
        } else {
            None
        };
        let selection = if self.selected_path().exists() {
            Some(report::read_selection_meta(&self.selected_path()).map_err(|source| {
                PipelineError::Io {
                    path: self.selected_path().display().to_string(),
                    source,
                }
            })?)
        } else {
            None
        };
        let compare = match &self.config.report.compare_scores {
            Some(path) => Some(load_scores(&self.resolve(path))?),
            None => None,
        };
        Ok(report::ReportInputs {
            corpus,
            raw,
            curated,
            transition,
            diversity,
            selection,
            compare,
            seed: self.config.seed,
        })
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, body: &T) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(body).expect("json serialisation cannot fail");
    fs::write(path, text).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })
}
