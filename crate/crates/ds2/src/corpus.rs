//! Corpus ingestion: canonical flat JSONL samples, the messages-array
//! conversion, and the Tulu chat template used for rating and embedding.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: missing required field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: field `{field}` must be non-empty")]
    EmptyField { line: usize, field: &'static str },
    #[error("duplicate id `{id}` on lines {first_line} and {second_line}")]
    DuplicateId {
        id: String,
        first_line: usize,
        second_line: usize,
    },
    #[error("sample `{id}`: {message}")]
    InvalidSample { id: String, message: String },
}

/// One (instruction, input, response) tuple; the unit that is rated,
/// embedded, and selected.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSample {
    pub id: String,
    pub dataset: String,
    pub instruction: String,
    pub input: String,
    /// The assistant response. Serialised under the `output` key.
    #[serde(rename = "output")]
    pub response: String,
    /// Conversation turns in the source data; 1 for flat records.
    #[serde(skip)]
    pub n_rounds: u32,
}

impl DataSample {
    pub fn new(
        id: impl Into<String>,
        dataset: impl Into<String>,
        instruction: impl Into<String>,
        input: impl Into<String>,
        response: impl Into<String>,
    ) -> Self {
        DataSample {
            id: id.into(),
            dataset: dataset.into(),
            instruction: instruction.into(),
            input: input.into(),
            response: response.into(),
            n_rounds: 1,
        }
    }

    fn validate(&self) -> Result<(), CorpusError> {
        let check = |field: &'static str, value: &str| {
            if value.is_empty() {
                Err(CorpusError::InvalidSample {
                    id: self.id.clone(),
                    message: format!("field `{field}` must be non-empty"),
                })
            } else {
                Ok(())
            }
        };
        check("id", &self.id)?;
        check("instruction", &self.instruction)?;
        check("response", &self.response)?;
        if self.n_rounds == 0 {
            return Err(CorpusError::InvalidSample {
                id: self.id.clone(),
                message: "n_rounds must be positive".into(),
            });
        }
        Ok(())
    }
}

/// An ordered, id-indexed set of samples. Order is ingestion order and is
/// stable across runs; the corpus is immutable once built.
#[derive(Debug, Clone)]
pub struct Corpus {
    samples: Vec<DataSample>,
    index: HashMap<String, usize>,
}

impl Corpus {
    pub fn from_samples(samples: Vec<DataSample>) -> Result<Self, CorpusError> {
        let mut index = HashMap::with_capacity(samples.len());
        for (pos, sample) in samples.iter().enumerate() {
            sample.validate()?;
            if let Some(first) = index.insert(sample.id.clone(), pos) {
                return Err(CorpusError::DuplicateId {
                    id: sample.id.clone(),
                    first_line: first + 1,
                    second_line: pos + 1,
                });
            }
        }
        Ok(Corpus { samples, index })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[DataSample] {
        &self.samples
    }

    pub fn iter(&self) -> std::slice::Iter<'_, DataSample> {
        self.samples.iter()
    }

    pub fn get(&self, id: &str) -> Option<&DataSample> {
        self.index.get(id).map(|&pos| &self.samples[pos])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.id.as_str())
    }
}

/// Input file layout for [`load_corpus`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    /// One `{id, dataset, instruction, input, output}` object per line.
    Flat,
    /// One `{id, dataset, messages: [{role, content}, ...]}` object per line.
    Messages,
}

#[derive(Deserialize)]
struct FlatLine {
    id: Option<String>,
    dataset: Option<String>,
    instruction: Option<String>,
    #[serde(default)]
    input: Option<String>,
    #[serde(alias = "response")]
    output: Option<String>,
}

#[derive(Deserialize)]
struct MessagesLine {
    id: Option<String>,
    dataset: Option<String>,
    messages: Vec<Message>,
}

#[derive(Deserialize)]
struct Message {
    role: String,
    content: String,
}

const FALLBACK_DATASET: &str = "unknown";

/// Load a JSONL corpus, preserving line order. Missing ids are synthesised
/// as `{dataset}-{line number}` so joins against score and embedding files
/// stay stable.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Corpus, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let sample = match format {
            CorpusFormat::Flat => parse_flat_line(&line, line_no)?,
            CorpusFormat::Messages => parse_messages_line(&line, line_no)?,
        };
        samples.push(sample);
    }
    // Re-check duplicates here so the error can name both lines.
    let mut seen: HashMap<String, usize> = HashMap::with_capacity(samples.len());
    for (pos, sample) in samples.iter().enumerate() {
        if let Some(first) = seen.insert(sample.id.clone(), pos + 1) {
            return Err(CorpusError::DuplicateId {
                id: sample.id.clone(),
                first_line: first,
                second_line: pos + 1,
            });
        }
    }
    Corpus::from_samples(samples)
}

fn parse_flat_line(line: &str, line_no: usize) -> Result<DataSample, CorpusError> {
    let raw: FlatLine = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    let dataset = raw.dataset.unwrap_or_else(|| FALLBACK_DATASET.to_string());
    let instruction = raw.instruction.ok_or(CorpusError::MissingField {
        line: line_no,
        field: "instruction",
    })?;
    let response = raw.output.ok_or(CorpusError::MissingField {
        line: line_no,
        field: "output",
    })?;
    if instruction.is_empty() {
        return Err(CorpusError::EmptyField {
            line: line_no,
            field: "instruction",
        });
    }
    if response.is_empty() {
        return Err(CorpusError::EmptyField {
            line: line_no,
            field: "output",
        });
    }
    let id = raw
        .id
        .filter(|id| !id.is_empty())
        .unwrap_or_else(|| format!("{dataset}-{line_no}"));
    Ok(DataSample {
        id,
        dataset,
        instruction,
        input: raw.input.unwrap_or_default(),
        response,
        n_rounds: 1,
    })
}

/// Multi-turn conversations are flattened: user turns concatenate into the
/// instruction, assistant turns into the response, and the pair count is
/// kept as `n_rounds`.
fn parse_messages_line(line: &str, line_no: usize) -> Result<DataSample, CorpusError> {
    let raw: MessagesLine = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    let mut user_turns = Vec::new();
    let mut assistant_turns = Vec::new();
    for msg in &raw.messages {
        match msg.role.as_str() {
            "user" => user_turns.push(msg.content.as_str()),
            "assistant" => assistant_turns.push(msg.content.as_str()),
            other => {
                return Err(CorpusError::Parse {
                    line: line_no,
                    message: format!("unsupported message role `{other}`"),
                })
            }
        }
    }
    if user_turns.is_empty() {
        return Err(CorpusError::MissingField {
            line: line_no,
            field: "messages (user turn)",
        });
    }
    if assistant_turns.is_empty() {
        return Err(CorpusError::MissingField {
            line: line_no,
            field: "messages (assistant turn)",
        });
    }
    let dataset = raw.dataset.unwrap_or_else(|| FALLBACK_DATASET.to_string());
    let id = raw
        .id
        .filter(|id| !id.is_empty())
        .unwrap_or_else(|| format!("{dataset}-{line_no}"));
    Ok(DataSample {
        id,
        dataset,
        instruction: user_turns.join("\n\n"),
        input: String::new(),
        response: assistant_turns.join("\n\n"),
        n_rounds: user_turns.len() as u32,
    })
}

/// Write a corpus in the canonical flat schema, one object per line with
/// keys in the fixed order `id, dataset, instruction, input, output`.
pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut writer = BufWriter::new(file);
    for sample in corpus.iter() {
        let json = serde_json::to_string(sample).map_err(|e| CorpusError::Parse {
            line: 0,
            message: e.to_string(),
        })?;
        writeln!(writer, "{json}").map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    writer.flush().map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Render a sample in the Tulu two-tag chat template. The input line is
/// omitted when the input is empty.
pub fn render_tulu(sample: &DataSample) -> String {
    if sample.input.is_empty() {
        format!(
            "<|User|>\n{}\n<|Assistant|>\n{}",
            sample.instruction, sample.response
        )
    } else {
        format!(
            "<|User|>\n{}\n{}\n<|Assistant|>\n{}",
            sample.instruction, sample.input, sample.response
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().expect("temp file");
        for line in lines {
            writeln!(f, "{line}").expect("write");
        }
        f
    }

    #[test]
    fn load_single_flat_line() {
        let f = write_lines(&[
            r#"{"id":"a1","dataset":"dolly","instruction":"Q","input":"","output":"A"}"#,
        ]);
        let corpus = load_corpus(f.path(), CorpusFormat::Flat).expect("load");
        assert_eq!(corpus.len(), 1);
        let s = corpus.get("a1").expect("sample");
        assert_eq!(s.dataset, "dolly");
        assert_eq!(s.instruction, "Q");
        assert_eq!(s.response, "A");
    }

    #[test]
    fn load_empty_file() {
        let f = write_lines(&[]);
        let corpus = load_corpus(f.path(), CorpusFormat::Flat).expect("load");
        assert!(corpus.is_empty());
    }

    #[test]
    fn duplicate_ids_rejected_naming_both_lines() {
        let f = write_lines(&[
            r#"{"id":"a1","dataset":"d","instruction":"Q","output":"A"}"#,
            r#"{"id":"a1","dataset":"d","instruction":"Q2","output":"A2"}"#,
        ]);
        match load_corpus(f.path(), CorpusFormat::Flat) {
            Err(CorpusError::DuplicateId {
                id,
                first_line,
                second_line,
            }) => {
                assert_eq!(id, "a1");
                assert_eq!((first_line, second_line), (1, 2));
            }
            other => panic!("expected duplicate-id error, got {other:?}"),
        }
    }

    #[test]
    fn missing_field_is_named() {
        let f = write_lines(&[r#"{"id":"a1","dataset":"d","output":"A"}"#]);
        match load_corpus(f.path(), CorpusFormat::Flat) {
            Err(CorpusError::MissingField { line: 1, field }) => {
                assert_eq!(field, "instruction")
            }
            other => panic!("expected missing-field error, got {other:?}"),
        }
    }

    #[test]
    fn parse_error_reports_line_number() {
        let f = write_lines(&[
            r#"{"id":"a1","dataset":"d","instruction":"Q","output":"A"}"#,
            "{not json",
        ]);
        match load_corpus(f.path(), CorpusFormat::Flat) {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn ids_synthesised_from_dataset_and_line() {
        let f = write_lines(&[
            r#"{"dataset":"flan","instruction":"Q","output":"A"}"#,
            r#"{"dataset":"flan","instruction":"Q2","output":"A2"}"#,
        ]);
        let corpus = load_corpus(f.path(), CorpusFormat::Flat).expect("load");
        assert_eq!(corpus.samples()[0].id, "flan-1");
        assert_eq!(corpus.samples()[1].id, "flan-2");
    }

    #[test]
    fn messages_multi_turn_flattened() {
        let f = write_lines(&[concat!(
            r#"{"id":"m1","dataset":"oasst","messages":["#,
            r#"{"role":"user","content":"hi"},{"role":"assistant","content":"hello"},"#,
            r#"{"role":"user","content":"more"},{"role":"assistant","content":"sure"}]}"#
        )]);
        let corpus = load_corpus(f.path(), CorpusFormat::Messages).expect("load");
        let s = corpus.get("m1").expect("sample");
        assert_eq!(s.instruction, "hi\n\nmore");
        assert_eq!(s.response, "hello\n\nsure");
        assert_eq!(s.n_rounds, 2);
    }

    #[test]
    fn render_tulu_omits_empty_input() {
        let s = DataSample::new("x", "d", "Add 1+1", "", "2");
        assert_eq!(render_tulu(&s), "<|User|>\nAdd 1+1\n<|Assistant|>\n2");
    }

    #[test]
    fn render_tulu_includes_input() {
        let s = DataSample::new("x", "d", "Summarize", "text t", "s");
        let text = render_tulu(&s);
        assert_eq!(text, "<|User|>\nSummarize\ntext t\n<|Assistant|>\ns");
        assert!(text.find("text t").unwrap() < text.find("<|Assistant|>").unwrap());
    }

    #[test]
    fn render_tulu_deterministic() {
        let s = DataSample::new("x", "d", "Q", "i", "A");
        assert_eq!(render_tulu(&s), render_tulu(&s));
    }

    #[test]
    fn save_writes_fixed_key_order() {
        let corpus =
            Corpus::from_samples(vec![DataSample::new("a", "d", "Q", "", "A")]).expect("corpus");
        let f = tempfile::NamedTempFile::new().expect("temp");
        save_corpus(&corpus, f.path()).expect("save");
        let text = std::fs::read_to_string(f.path()).expect("read");
        assert_eq!(
            text,
            "{\"id\":\"a\",\"dataset\":\"d\",\"instruction\":\"Q\",\"input\":\"\",\"output\":\"A\"}\n"
        );
    }

    #[test]
    fn sample_count_matches_line_count() {
        let lines: Vec<String> = (0..17)
            .map(|i| format!(r#"{{"id":"s{i}","dataset":"d","instruction":"Q{i}","output":"A{i}"}}"#))
            .collect();
        let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
        let f = write_lines(&refs);
        let corpus = load_corpus(f.path(), CorpusFormat::Flat).expect("load");
        assert_eq!(corpus.len(), 17);
    }

    proptest::proptest! {
        #[test]
        fn save_load_round_trip(
            instruction in "[a-zA-Z0-9 .,!?]{1,80}",
            input in "[a-zA-Z0-9 .,!?]{0,40}",
            response in "\\PC{1,80}",
        ) {
            let corpus = Corpus::from_samples(vec![DataSample::new(
                "rt-1", "pool", instruction, input, response,
            )]).expect("corpus");
            let f = tempfile::NamedTempFile::new().expect("temp");
            save_corpus(&corpus, f.path()).expect("save");
            let reloaded = load_corpus(f.path(), CorpusFormat::Flat).expect("load");
            proptest::prop_assert_eq!(reloaded.samples(), corpus.samples());
        }
    }
}
