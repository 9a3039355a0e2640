//! Quality rating: prompt construction, parsing of the judge's JSON reply,
//! rescaling of 1-10 overall ratings to the 0-5 scale, and the concurrent,
//! cached rating loop over a corpus.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{prompt_hash, ChatBackend, ClientError, ResponseCache};
use crate::corpus::{Corpus, DataSample};

#[derive(Debug, Error)]
pub enum RaterError {
    #[error("overall rating {0} outside 1-10")]
    OverallOutOfRange(u8),
    #[error("score {0} outside 0-5")]
    ScoreOutOfRange(u8),
    #[error(transparent)]
    Parse(#[from] RatingParseError),
    #[error("endpoint unreachable and cache incomplete: {0}")]
    EndpointUnreachable(String),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("scores io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("scores file line {line}: {message}")]
    BadScoresLine { line: usize, message: String },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RatingParseError {
    #[error("no JSON object found in response")]
    NoObjectFound,
    #[error("rating object is missing key `{0}`")]
    MissingKey(&'static str),
    #[error("rating key `{key}` has non-numeric value `{value}`")]
    NonNumeric { key: &'static str, value: String },
}

/// The four 1-10 sub-scores returned by the judge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRating {
    pub rarity: u8,
    pub complexity: u8,
    pub informativeness: u8,
    pub overall: u8,
}

/// A rated score on the merged 0-5 scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RatedScore(u8);

impl RatedScore {
    pub fn new(value: u8) -> Result<Self, RaterError> {
        if value > 5 {
            return Err(RaterError::ScoreOutOfRange(value));
        }
        Ok(RatedScore(value))
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

const SYSTEM_PROMPT: &str = "As a data quality estimator, your task is to assess the quality of \
the data sample based on the criteria: Rarity, Complexity, and Informativeness. Please rate the \
sample on a scale from 1 to 10 for each criterion, and return an overall rating on a scale from \
1 to 10, where a higher score indicates a higher level of quality. Ensure that the ratings are \
not overly concentrated around a specific score. If multiple samples have similar qualities, \
consider spreading the scores more evenly to reflect subtle differences.";

/// Build the (system, user) prompt pair for one sample. The user prompt
/// fills the Instruction/Input/Response slots verbatim.
pub fn build_prompt(sample: &DataSample) -> (String, String) {
    let user = format!(
        "Now, please carefully evaluate the following data sample and return the integral \
         evaluation scores using the JSON format:\n\
         {{\"Rarity\": <number, 1-10>,\n\
         \"Complexity\": <number, 1-10>,\n\
         \"Informativeness\": <number, 1-10>,\n\
         \"Overall rating\": <number, 1-10>}}\n\
         Instruction: {}\n\
         Input: {}\n\
         Response: {}",
        sample.instruction, sample.input, sample.response
    );
    (SYSTEM_PROMPT.to_string(), user)
}

/// A parsed rating plus whether any value had to be clamped into 1-10.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParsedRating {
    pub rating: RawRating,
    pub clamped: bool,
}

/// Extract the first balanced JSON object from free-form reply text and read
/// the four rating keys. Out-of-range numbers are clamped and flagged rather
/// than rejected.
pub fn parse_rating(response_text: &str) -> Result<ParsedRating, RatingParseError> {
    let object = first_json_object(response_text).ok_or(RatingParseError::NoObjectFound)?;
    let mut clamped = false;
    let mut read = |key: &'static str| -> Result<u8, RatingParseError> {
        let value = object.get(key).ok_or(RatingParseError::MissingKey(key))?;
        let number = value.as_f64().ok_or_else(|| RatingParseError::NonNumeric {
            key,
            value: value.to_string(),
        })?;
        let rounded = number.round();
        if rounded != number || !(1.0..=10.0).contains(&rounded) {
            clamped = true;
        }
        Ok(rounded.clamp(1.0, 10.0) as u8)
    };
    let rating = RawRating {
        rarity: read("Rarity")?,
        complexity: read("Complexity")?,
        informativeness: read("Informativeness")?,
        overall: read("Overall rating")?,
    };
    Ok(ParsedRating { rating, clamped })
}

/// Scan for the first balanced `{...}` span that parses as a JSON object,
/// honouring string literals and escapes.
fn first_json_object(text: &str) -> Option<serde_json::Map<String, serde_json::Value>> {
    let bytes = text.as_bytes();
    let mut start = 0;
    while let Some(open) = text[start..].find('{').map(|i| i + start) {
        let mut depth = 0usize;
        let mut in_string = false;
        let mut escaped = false;
        let mut end = None;
        for (offset, &b) in bytes[open..].iter().enumerate() {
            if in_string {
                if escaped {
                    escaped = false;
                } else if b == b'\\' {
                    escaped = true;
                } else if b == b'"' {
                    in_string = false;
                }
                continue;
            }
            match b {
                b'"' => in_string = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        end = Some(open + offset + 1);
                        break;
                    }
                }
                _ => {}
            }
        }
        let end = end?;
        if let Ok(serde_json::Value::Object(map)) =
            serde_json::from_str::<serde_json::Value>(&text[open..end])
        {
            return Some(map);
        }
        start = open + 1;
    }
    None
}

/// Map a 1-10 overall rating to 0-5: the low band 1-4 merges into 0, the top
/// band 9-10 merges into 5, and the middle shifts down by four.
pub fn rescale_score(overall: u8) -> Result<RatedScore, RaterError> {
    let value = match overall {
        1..=4 => 0,
        5 => 1,
        6 => 2,
        7 => 3,
        8 => 4,
        9 | 10 => 5,
        _ => return Err(RaterError::OverallOutOfRange(overall)),
    };
    Ok(RatedScore(value))
}

/// Per-sample rating status in the scores file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreStatus {
    Rated,
    Unrated,
}

/// One line of the scores JSONL file. Unrated samples carry null sub-scores
/// and score 0 so they are never preferred over any rated sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub id: String,
    pub rarity: Option<u8>,
    pub complexity: Option<u8>,
    pub informativeness: Option<u8>,
    pub overall: Option<u8>,
    pub score: u8,
    pub status: ScoreStatus,
}

impl ScoreRow {
    pub fn rated(id: &str, rating: RawRating, score: RatedScore) -> Self {
        ScoreRow {
            id: id.to_string(),
            rarity: Some(rating.rarity),
            complexity: Some(rating.complexity),
            informativeness: Some(rating.informativeness),
            overall: Some(rating.overall),
            score: score.value(),
            status: ScoreStatus::Rated,
        }
    }

    pub fn unrated(id: &str) -> Self {
        ScoreRow {
            id: id.to_string(),
            rarity: None,
            complexity: None,
            informativeness: None,
            overall: None,
            score: 0,
            status: ScoreStatus::Unrated,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RaterOptions {
    /// Bound on concurrently in-flight requests.
    pub concurrency: usize,
    /// Re-prompts allowed when the reply fails to parse.
    pub reparse_attempts: u32,
}

impl Default for RaterOptions {
    fn default() -> Self {
        RaterOptions {
            concurrency: 4,
            reparse_attempts: 2,
        }
    }
}

#[derive(Debug)]
pub struct RatingOutcome {
    /// One row per corpus sample, in corpus order.
    pub rows: Vec<ScoreRow>,
    pub cache_hits: usize,
    pub requests: usize,
    pub clamped: usize,
    pub unrated: usize,
}

/// Rate every sample in the corpus. Responses are cached by
/// (model, id, prompt hash), so a rerun with a warm cache makes zero
/// network calls. Transport failures abort; persistent parse failures mark
/// the sample unrated and leave the rest of the run intact.
pub fn rate_corpus(
    corpus: &Corpus,
    backend: &dyn ChatBackend,
    model: &str,
    cache_path: &Path,
    opts: &RaterOptions,
) -> Result<RatingOutcome, RaterError> {
    let cache = ResponseCache::open(cache_path)?;
    let n = corpus.len();
    let results: Mutex<Vec<Option<ScoreRow>>> = Mutex::new(vec![None; n]);
    let cache_hits = AtomicUsize::new(0);
    let requests = AtomicUsize::new(0);
    let clamped = AtomicUsize::new(0);
    let next = AtomicUsize::new(0);
    let abort: Mutex<Option<RaterError>> = Mutex::new(None);

    let workers = opts.concurrency.max(1).min(n.max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::Relaxed);
                if idx >= n || abort.lock().expect("abort flag poisoned").is_some() {
                    return;
                }
                let sample = &corpus.samples()[idx];
                match rate_one(
                    sample,
                    backend,
                    model,
                    &cache,
                    opts.reparse_attempts,
                    &cache_hits,
                    &requests,
                ) {
                    Ok((row, was_clamped)) => {
                        if was_clamped {
                            clamped.fetch_add(1, Ordering::Relaxed);
                        }
                        results.lock().expect("results poisoned")[idx] = Some(row);
                    }
                    Err(err) => {
                        let mut slot = abort.lock().expect("abort flag poisoned");
                        if slot.is_none() {
                            *slot = Some(err);
                        }
                        return;
                    }
                }
            });
        }
    });

    if let Some(err) = abort.into_inner().expect("abort flag poisoned") {
        return Err(err);
    }
    let rows: Vec<ScoreRow> = results
        .into_inner()
        .expect("results poisoned")
        .into_iter()
        .map(|row| row.expect("all samples visited"))
        .collect();
    let unrated = rows
        .iter()
        .filter(|r| r.status == ScoreStatus::Unrated)
        .count();
    Ok(RatingOutcome {
        rows,
        cache_hits: cache_hits.into_inner(),
        requests: requests.into_inner(),
        clamped: clamped.into_inner(),
        unrated,
    })
}

fn rate_one(
    sample: &DataSample,
    backend: &dyn ChatBackend,
    model: &str,
    cache: &ResponseCache,
    reparse_attempts: u32,
    cache_hits: &AtomicUsize,
    requests: &AtomicUsize,
) -> Result<(ScoreRow, bool), RaterError> {
    let (system, user) = build_prompt(sample);
    let hash = prompt_hash(&system, &user);

    if let Some(content) = cache.get(model, &sample.id, &hash) {
        cache_hits.fetch_add(1, Ordering::Relaxed);
        return Ok(row_from_content(&sample.id, content));
    }

    let mut content: Option<String> = None;
    for _ in 0..=reparse_attempts {
        requests.fetch_add(1, Ordering::Relaxed);
        match backend.complete(model, &system, &user) {
            Ok(text) => {
                let parsed_ok = parse_rating(&text).is_ok();
                content = Some(text);
                if parsed_ok {
                    break;
                }
            }
            Err(ClientError::Unreachable(msg)) => {
                return Err(RaterError::EndpointUnreachable(msg));
            }
            Err(ClientError::Status { .. }) => {
                // Retries already happened inside the client; give up on
                // this sample but keep the run going.
                content = None;
                break;
            }
            Err(other) => return Err(other.into()),
        }
    }

    match content {
        Some(text) => {
            cache.put(model, &sample.id, &hash, &text)?;
            Ok(row_from_content(&sample.id, &text))
        }
        None => Ok((ScoreRow::unrated(&sample.id), false)),
    }
}

fn row_from_content(id: &str, content: &str) -> (ScoreRow, bool) {
    match parse_rating(content) {
        Ok(parsed) => {
            let score = rescale_score(parsed.rating.overall)
                .expect("parsed overall is clamped into 1-10");
            (ScoreRow::rated(id, parsed.rating, score), parsed.clamped)
        }
        Err(_) => (ScoreRow::unrated(id), false),
    }
}

pub fn save_scores(rows: &[ScoreRow], path: &Path) -> Result<(), RaterError> {
    let file = File::create(path).map_err(|source| RaterError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut writer = BufWriter::new(file);
    for row in rows {
        let line = serde_json::to_string(row).expect("score row serialisation cannot fail");
        writeln!(writer, "{line}").map_err(|source| RaterError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    writer.flush().map_err(|source| RaterError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_scores(path: &Path) -> Result<Vec<ScoreRow>, RaterError> {
    let file = File::open(path).map_err(|source| RaterError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut rows = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| RaterError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ScoreRow = serde_json::from_str(&line).map_err(|e| RaterError::BadScoresLine {
            line: idx + 1,
            message: e.to_string(),
        })?;
        if row.score > 5 {
            return Err(RaterError::BadScoresLine {
                line: idx + 1,
                message: format!("score {} outside 0-5", row.score),
            });
        }
        rows.push(row);
    }
    Ok(rows)
}
