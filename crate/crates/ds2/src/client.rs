//! OpenAI-compatible chat/embedding backends plus deterministic offline
//! stubs, with retrying HTTP transport, token-bucket rate limiting, and the
//! append-only response cache shared by the rating and embedding loops.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::{sha256_hex, sha256_seed};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("endpoint unreachable: {0}")]
    Unreachable(String),
    #[error("endpoint returned HTTP {status} after {attempts} attempts: {body}")]
    Status {
        status: u16,
        attempts: u32,
        body: String,
    },
    #[error("malformed endpoint response: {0}")]
    Malformed(String),
    #[error("bad endpoint url `{url}`: {message}")]
    BadUrl { url: String, message: String },
    #[error("cache io error on {path}: {source}")]
    CacheIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Connection settings for one OpenAI-compatible endpoint.
///
/// `base_url` selects the transport: `http(s)://...` talks to a real server,
/// while `stub://...` urls are deterministic in-process fakes used for
/// offline runs and tests (`stub://fixed?overall=8`,
/// `stub://weighted?w=1,2,...` with ten weights for overall ratings 1-10,
/// and `stub://hash?d=64` for embeddings).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key: Option<String>,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    /// Token-bucket rate limit; `None` means unlimited.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requests_per_second: Option<f64>,
}

fn default_retries() -> u32 {
    3
}

fn default_timeout() -> u64 {
    120
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            base_url: String::new(),
            model: String::new(),
            api_key: None,
            max_retries: default_retries(),
            timeout_secs: default_timeout(),
            requests_per_second: None,
        }
    }
}

impl EndpointConfig {
    /// Credentials may be overridden from the environment: `DS2_API_BASE`,
    /// `DS2_API_KEY`, and (chat only) `DS2_MODEL`.
    pub fn apply_env(&mut self, include_model: bool) {
        if let Ok(base) = std::env::var("DS2_API_BASE") {
            if !base.is_empty() {
                self.base_url = base;
            }
        }
        if let Ok(key) = std::env::var("DS2_API_KEY") {
            if !key.is_empty() {
                self.api_key = Some(key);
            }
        }
        if include_model {
            if let Ok(model) = std::env::var("DS2_MODEL") {
                if !model.is_empty() {
                    self.model = model;
                }
            }
        }
    }
}

pub trait ChatBackend: Send + Sync {
    /// One system+user completion at temperature 0; returns the assistant text.
    fn complete(&self, model: &str, system: &str, user: &str) -> Result<String, ClientError>;
}

pub trait EmbedBackend: Send + Sync {
    /// Embed a batch of texts, one vector per text, in input order.
    fn embed(&self, model: &str, texts: &[String]) -> Result<Vec<Vec<f32>>, ClientError>;
}

pub fn chat_backend(cfg: &EndpointConfig) -> Result<Box<dyn ChatBackend>, ClientError> {
    if let Some(rest) = cfg.base_url.strip_prefix("stub://") {
        let (kind, params) = parse_stub(rest, &cfg.base_url)?;
        return match kind.as_str() {
            "fixed" => {
                let overall: u8 = param(&params, "overall", &cfg.base_url)?;
                Ok(Box::new(StubFixedChat { overall }))
            }
            "weighted" => {
                let raw = params.get("w").ok_or_else(|| ClientError::BadUrl {
                    url: cfg.base_url.clone(),
                    message: "missing `w` weights".into(),
                })?;
                let weights: Vec<f64> = raw
                    .split(',')
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| ClientError::BadUrl {
                        url: cfg.base_url.clone(),
                        message: e.to_string(),
                    })?;
                if weights.len() != 10 || weights.iter().any(|w| *w < 0.0) {
                    return Err(ClientError::BadUrl {
                        url: cfg.base_url.clone(),
                        message: "`w` must be ten non-negative weights for ratings 1-10".into(),
                    });
                }
                Ok(Box::new(StubWeightedChat { weights }))
            }
            other => Err(ClientError::BadUrl {
                url: cfg.base_url.clone(),
                message: format!("unknown chat stub `{other}`"),
            }),
        };
    }
    Ok(Box::new(HttpClient::new(cfg)?))
}

pub fn embed_backend(cfg: &EndpointConfig) -> Result<Box<dyn EmbedBackend>, ClientError> {
    if let Some(rest) = cfg.base_url.strip_prefix("stub://") {
        let (kind, params) = parse_stub(rest, &cfg.base_url)?;
        return match kind.as_str() {
            "hash" => {
                let dim: usize = param(&params, "d", &cfg.base_url)?;
                if dim == 0 {
                    return Err(ClientError::BadUrl {
                        url: cfg.base_url.clone(),
                        message: "`d` must be positive".into(),
                    });
                }
                Ok(Box::new(StubHashEmbed { dim }))
            }
            other => Err(ClientError::BadUrl {
                url: cfg.base_url.clone(),
                message: format!("unknown embedding stub `{other}`"),
            }),
        };
    }
    Ok(Box::new(HttpClient::new(cfg)?))
}

fn parse_stub(rest: &str, url: &str) -> Result<(String, HashMap<String, String>), ClientError> {
    let (kind, query) = match rest.split_once('?') {
        Some((k, q)) => (k, q),
        None => (rest, ""),
    };
    if kind.is_empty() {
        return Err(ClientError::BadUrl {
            url: url.to_string(),
            message: "missing stub kind".into(),
        });
    }
    let mut params = HashMap::new();
    for pair in query.split('&').filter(|p| !p.is_empty()) {
        let (k, v) = pair.split_once('=').ok_or_else(|| ClientError::BadUrl {
            url: url.to_string(),
            message: format!("bad query pair `{pair}`"),
        })?;
        params.insert(k.to_string(), v.to_string());
    }
    Ok((kind.to_string(), params))
}

fn param<T: std::str::FromStr>(
    params: &HashMap<String, String>,
    key: &str,
    url: &str,
) -> Result<T, ClientError>
where
    T::Err: std::fmt::Display,
{
    params
        .get(key)
        .ok_or_else(|| ClientError::BadUrl {
            url: url.to_string(),
            message: format!("missing `{key}` parameter"),
        })?
        .parse()
        .map_err(|e: T::Err| ClientError::BadUrl {
            url: url.to_string(),
            message: format!("bad `{key}` parameter: {e}"),
        })
}

fn rating_json(overall: u8) -> String {
    format!(
        "{{\"Rarity\": {overall}, \"Complexity\": {overall}, \
         \"Informativeness\": {overall}, \"Overall rating\": {overall}}}"
    )
}

/// Always replies with the same overall rating.
struct StubFixedChat {
    overall: u8,
}

impl ChatBackend for StubFixedChat {
    fn complete(&self, _model: &str, _system: &str, _user: &str) -> Result<String, ClientError> {
        Ok(rating_json(self.overall))
    }
}

/// Replies with an overall rating in 1..=10 drawn from fixed weights, keyed
/// deterministically by (model, user prompt).
struct StubWeightedChat {
    weights: Vec<f64>,
}

impl ChatBackend for StubWeightedChat {
    fn complete(&self, model: &str, _system: &str, user: &str) -> Result<String, ClientError> {
        let seed = sha256_seed(format!("{model}\u{1f}{user}").as_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total: f64 = self.weights.iter().sum();
        let mut draw = rng.random_range(0.0..total);
        let mut overall = 10u8;
        for (i, w) in self.weights.iter().enumerate() {
            if draw < *w {
                overall = i as u8 + 1;
                break;
            }
            draw -= w;
        }
        Ok(rating_json(overall))
    }
}

/// Deterministic unit vector derived from the text hash.
struct StubHashEmbed {
    dim: usize,
}

impl EmbedBackend for StubHashEmbed {
    fn embed(&self, _model: &str, texts: &[String]) -> Result<Vec<Vec<f32>>, ClientError> {
        Ok(texts
            .iter()
            .map(|text| {
                let mut rng = ChaCha8Rng::seed_from_u64(sha256_seed(text.as_bytes()));
                let mut v: Vec<f32> = (0..self.dim)
                    .map(|_| {
                        let x: f64 = rng.sample(StandardNormal);
                        x as f32
                    })
                    .collect();
                let norm = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
                for x in &mut v {
                    *x = (*x as f64 / norm) as f32;
                }
                v
            })
            .collect())
    }
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [WireMessage<'a>; 2],
    temperature: f64,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: String,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedDatum>,
}

#[derive(Deserialize)]
struct EmbedDatum {
    index: usize,
    embedding: Vec<f32>,
}

/// Blocking HTTP client for `{base}/chat/completions` and
/// `{base}/embeddings`, with exponential-backoff retries on transport
/// errors, 429s, and 5xx responses.
pub struct HttpClient {
    agent: ureq::Agent,
    base_url: String,
    api_key: Option<String>,
    max_retries: u32,
    bucket: Option<Mutex<TokenBucket>>,
}

impl HttpClient {
    pub fn new(cfg: &EndpointConfig) -> Result<Self, ClientError> {
        if !cfg.base_url.starts_with("http://") && !cfg.base_url.starts_with("https://") {
            return Err(ClientError::BadUrl {
                url: cfg.base_url.clone(),
                message: "expected http(s):// or stub:// url".into(),
            });
        }
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build();
        Ok(HttpClient {
            agent: ureq::Agent::new_with_config(config),
            base_url: cfg.base_url.trim_end_matches('/').to_string(),
            api_key: cfg.api_key.clone(),
            max_retries: cfg.max_retries,
            bucket: cfg
                .requests_per_second
                .map(|rate| Mutex::new(TokenBucket::new(rate))),
        })
    }

    fn post_json<T: Serialize>(&self, path: &str, body: &T) -> Result<String, ClientError> {
        let url = format!("{}{}", self.base_url, path);
        let mut last_err: Option<ClientError> = None;
        for attempt in 0..=self.max_retries {
            if attempt > 0 {
                std::thread::sleep(backoff_delay(attempt));
            }
            if let Some(bucket) = &self.bucket {
                let wait = bucket.lock().expect("token bucket poisoned").take();
                if !wait.is_zero() {
                    std::thread::sleep(wait);
                }
            }
            let mut req = self.agent.post(&url);
            if let Some(key) = &self.api_key {
                req = req.header("Authorization", &format!("Bearer {key}"));
            }
            match req.send_json(body) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    let text = resp
                        .body_mut()
                        .read_to_string()
                        .map_err(|e| ClientError::Malformed(e.to_string()))?;
                    if (200..300).contains(&status) {
                        return Ok(text);
                    }
                    let retryable = status == 429 || (500..600).contains(&status);
                    let err = ClientError::Status {
                        status,
                        attempts: attempt + 1,
                        body: text.chars().take(200).collect(),
                    };
                    if !retryable {
                        return Err(err);
                    }
                    last_err = Some(err);
                }
                Err(e) => {
                    last_err = Some(ClientError::Unreachable(e.to_string()));
                }
            }
        }
        Err(last_err.unwrap_or_else(|| ClientError::Unreachable("no attempts made".into())))
    }
}

fn backoff_delay(attempt: u32) -> Duration {
    let base = Duration::from_millis(250);
    base.saturating_mul(1u32 << (attempt - 1).min(6))
}

impl ChatBackend for HttpClient {
    fn complete(&self, model: &str, system: &str, user: &str) -> Result<String, ClientError> {
        let req = ChatRequest {
            model,
            messages: [
                WireMessage {
                    role: "system",
                    content: system,
                },
                WireMessage {
                    role: "user",
                    content: user,
                },
            ],
            temperature: 0.0,
        };
        let text = self.post_json("/chat/completions", &req)?;
        let parsed: ChatResponse =
            serde_json::from_str(&text).map_err(|e| ClientError::Malformed(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| ClientError::Malformed("response had no choices".into()))
    }
}

impl EmbedBackend for HttpClient {
    fn embed(&self, model: &str, texts: &[String]) -> Result<Vec<Vec<f32>>, ClientError> {
        let req = EmbedRequest {
            model,
            input: texts,
        };
        let text = self.post_json("/embeddings", &req)?;
        let parsed: EmbedResponse =
            serde_json::from_str(&text).map_err(|e| ClientError::Malformed(e.to_string()))?;
        if parsed.data.len() != texts.len() {
            return Err(ClientError::Malformed(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                parsed.data.len()
            )));
        }
        let mut out = vec![Vec::new(); texts.len()];
        for datum in parsed.data {
            if datum.index >= out.len() {
                return Err(ClientError::Malformed(format!(
                    "embedding index {} out of range",
                    datum.index
                )));
            }
            out[datum.index] = datum.embedding;
        }
        Ok(out)
    }
}

struct TokenBucket {
    rate: f64,
    tokens: f64,
    last: Instant,
}

impl TokenBucket {
    fn new(rate: f64) -> Self {
        TokenBucket {
            rate: rate.max(1e-6),
            tokens: 1.0,
            last: Instant::now(),
        }
    }

    /// Reserve one token; returns how long the caller must sleep before
    /// proceeding.
    fn take(&mut self) -> Duration {
        let now = Instant::now();
        self.tokens = (self.tokens + now.duration_since(self.last).as_secs_f64() * self.rate)
            .min(self.rate.max(1.0));
        self.last = now;
        if self.tokens >= 1.0 {
            self.tokens -= 1.0;
            Duration::ZERO
        } else {
            let deficit = 1.0 - self.tokens;
            self.tokens = 0.0;
            Duration::from_secs_f64(deficit / self.rate)
        }
    }
}

/// Append-only JSONL cache keyed by (model, sample id, prompt hash).
/// Reruns with a warm cache make zero network calls.
pub struct ResponseCache {
    path: std::path::PathBuf,
    entries: HashMap<(String, String, String), String>,
    writer: Mutex<BufWriter<File>>,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    model: String,
    id: String,
    prompt_hash: String,
    content: String,
}

impl ResponseCache {
    pub fn open(path: &Path) -> Result<Self, ClientError> {
        let mut entries = HashMap::new();
        if path.exists() {
            let file = File::open(path).map_err(|source| ClientError::CacheIo {
                path: path.display().to_string(),
                source,
            })?;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|source| ClientError::CacheIo {
                    path: path.display().to_string(),
                    source,
                })?;
                if line.trim().is_empty() {
                    continue;
                }
                // Tolerate truncated trailing lines from interrupted runs.
                if let Ok(entry) = serde_json::from_str::<CacheLine>(&line) {
                    entries.insert((entry.model, entry.id, entry.prompt_hash), entry.content);
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|source| ClientError::CacheIo {
                path: path.display().to_string(),
                source,
            })?;
        Ok(ResponseCache {
            path: path.to_path_buf(),
            entries,
            writer: Mutex::new(BufWriter::new(file)),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, model: &str, id: &str, prompt_hash: &str) -> Option<&str> {
        self.entries
            .get(&(model.to_string(), id.to_string(), prompt_hash.to_string()))
            .map(String::as_str)
    }

    /// Thread-safe append; entries become visible to `get` only after the
    /// cache is reopened, which is fine because each sample is rated once
    /// per run.
    pub fn put(
        &self,
        model: &str,
        id: &str,
        prompt_hash: &str,
        content: &str,
    ) -> Result<(), ClientError> {
        let line = serde_json::to_string(&CacheLine {
            model: model.to_string(),
            id: id.to_string(),
            prompt_hash: prompt_hash.to_string(),
            content: content.to_string(),
        })
        .expect("cache line serialisation cannot fail");
        let mut writer = self.writer.lock().expect("cache writer poisoned");
        writeln!(writer, "{line}").map_err(|source| ClientError::CacheIo {
            path: self.path.display().to_string(),
            source,
        })?;
        writer.flush().map_err(|source| ClientError::CacheIo {
            path: self.path.display().to_string(),
            source,
        })
    }
}

/// Stable content hash used in cache keys.
pub fn prompt_hash(system: &str, user: &str) -> String {
    sha256_hex(format!("{system}\u{1f}{user}").as_bytes())
}
