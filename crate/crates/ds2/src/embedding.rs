//! Embedding ingestion and normalisation. Embeddings either come from a
//! binary/JSONL file or are fetched in batches from an embedding endpoint;
//! rows are unit-normalised so dot products are cosine similarities.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ClientError, EmbedBackend, ResponseCache};
use crate::corpus::{render_tulu, Corpus};
use crate::util::sha256_hex;

const MAGIC: &[u8; 4] = b"DS2E";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic or version in {path}")]
    BadHeader { path: String },
    #[error("row {row}: dimension {got} does not match {expected}")]
    DimensionMismatch {
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("embedding file has {got} rows but corpus has {expected}")]
    CountMismatch { got: usize, expected: usize },
    #[error("row {row}: id `{got}` does not match corpus id `{expected}`")]
    IdMismatch {
        row: usize,
        got: String,
        expected: String,
    },
    #[error("row for id `{0}` has zero norm")]
    ZeroRow(String),
    #[error("jsonl line {line}: {message}")]
    BadLine { line: usize, message: String },
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("embedding batch returned vector of dim {got}, expected {expected}")]
    BatchDimension { got: usize, expected: usize },
}

/// N x d matrix of 32-bit rows aligned with corpus order.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    data: Vec<f32>,
    n: usize,
    d: usize,
    ids: Vec<String>,
}

impl EmbeddingMatrix {
    pub fn from_rows(rows: Vec<Vec<f32>>, ids: Vec<String>) -> Result<Self, EmbeddingError> {
        assert_eq!(rows.len(), ids.len(), "rows and ids must align");
        let d = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * d);
        for (row_idx, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(EmbeddingError::DimensionMismatch {
                    row: row_idx,
                    got: row.len(),
                    expected: d,
                });
            }
            data.extend_from_slice(row);
        }
        Ok(EmbeddingMatrix {
            n: rows.len(),
            d,
            data,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// L2 norm of a row, accumulated in f64.
    pub fn row_norm(&self, i: usize) -> f64 {
        self.row(i)
            .iter()
            .map(|x| (*x as f64) * (*x as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// True when every row is unit length within `tol`.
    pub fn is_normalized(&self, tol: f64) -> bool {
        (0..self.n).all(|i| (self.row_norm(i) - 1.0).abs() <= tol)
    }
}

/// Divide each row by its L2 norm. Idempotent; zero rows are an error that
/// names the offending id.
pub fn normalize_rows(mut m: EmbeddingMatrix) -> Result<EmbeddingMatrix, EmbeddingError> {
    for i in 0..m.n {
        let norm = m.row_norm(i);
        if norm == 0.0 {
            return Err(EmbeddingError::ZeroRow(m.ids[i].clone()));
        }
        let start = i * m.d;
        for x in &mut m.data[start..start + m.d] {
            *x = (*x as f64 / norm) as f32;
        }
    }
    Ok(m)
}

/// Write the binary embedding format: magic `DS2E`, u32 version, u64 N,
/// u32 d, then N*d little-endian f32 values row-major. Ids live in the
/// corpus file; alignment is by order.
pub fn save_embeddings(m: &EmbeddingMatrix, path: &Path) -> Result<(), EmbeddingError> {
    let io_err = |source| EmbeddingError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_u32::<LittleEndian>(VERSION).map_err(io_err)?;
    w.write_u64::<LittleEndian>(m.n as u64).map_err(io_err)?;
    w.write_u32::<LittleEndian>(m.d as u32).map_err(io_err)?;
    for value in &m.data {
        w.write_f32::<LittleEndian>(*value).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

#[derive(Deserialize)]
struct JsonlEmbeddingLine {
    id: String,
    embedding: Vec<f32>,
}

/// Load embeddings from either the binary format (detected by magic) or
/// JSONL `{"id", "embedding"}` lines, validating alignment with the corpus.
pub fn load_embeddings(path: &Path, corpus: &Corpus) -> Result<EmbeddingMatrix, EmbeddingError> {
    let io_err = |source| EmbeddingError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut file = File::open(path).map_err(io_err)?;
    let mut magic = [0u8; 4];
    let is_binary = match file.read_exact(&mut magic) {
        Ok(()) => &magic == MAGIC,
        Err(_) => false,
    };
    if is_binary {
        load_binary(file, path, corpus)
    } else {
        load_jsonl(path, corpus)
    }
}

fn load_binary(
    mut file: File,
    path: &Path,
    corpus: &Corpus,
) -> Result<EmbeddingMatrix, EmbeddingError> {
    let io_err = |source| EmbeddingError::Io {
        path: path.display().to_string(),
        source,
    };
    let version = file.read_u32::<LittleEndian>().map_err(io_err)?;
    if version != VERSION {
        return Err(EmbeddingError::BadHeader {
            path: path.display().to_string(),
        });
    }
    let n = file.read_u64::<LittleEndian>().map_err(io_err)? as usize;
    let d = file.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    if n != corpus.len() {
        return Err(EmbeddingError::CountMismatch {
            got: n,
            expected: corpus.len(),
        });
    }
    let mut reader = BufReader::new(file);
    let mut data = vec![0f32; n * d];
    reader
        .read_f32_into::<LittleEndian>(&mut data)
        .map_err(io_err)?;
    // Trailing bytes mean the header lied about the shape.
    let mut probe = [0u8; 1];
    if reader.read(&mut probe).map_err(io_err)? != 0 {
        return Err(EmbeddingError::BadHeader {
            path: path.display().to_string(),
        });
    }
    Ok(EmbeddingMatrix {
        data,
        n,
        d,
        ids: corpus.ids().map(str::to_string).collect(),
    })
}

fn load_jsonl(path: &Path, corpus: &Corpus) -> Result<EmbeddingMatrix, EmbeddingError> {
    let io_err = |source| EmbeddingError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(corpus.len());
    let mut d: Option<usize> = None;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: JsonlEmbeddingLine =
            serde_json::from_str(&line).map_err(|e| EmbeddingError::BadLine {
                line: idx + 1,
                message: e.to_string(),
            })?;
        let row_idx = rows.len();
        if row_idx >= corpus.len() {
            return Err(EmbeddingError::CountMismatch {
                got: row_idx + 1,
                expected: corpus.len(),
            });
        }
        let expected_id = &corpus.samples()[row_idx].id;
        if &parsed.id != expected_id {
            return Err(EmbeddingError::IdMismatch {
                row: row_idx,
                got: parsed.id,
                expected: expected_id.clone(),
            });
        }
        let dim = *d.get_or_insert(parsed.embedding.len());
        if parsed.embedding.len() != dim {
            return Err(EmbeddingError::DimensionMismatch {
                row: row_idx,
                got: parsed.embedding.len(),
                expected: dim,
            });
        }
        rows.push(parsed.embedding);
    }
    if rows.len() != corpus.len() {
        return Err(EmbeddingError::CountMismatch {
            got: rows.len(),
            expected: corpus.len(),
        });
    }
    EmbeddingMatrix::from_rows(rows, corpus.ids().map(str::to_string).collect())
}

#[derive(Serialize, Deserialize)]
struct CachedVector {
    embedding: Vec<f32>,
}

/// Fetch one embedding per sample (of the rendered Tulu text) in batches.
/// Cached like the rater; any failure aborts because a partially embedded
/// corpus is unusable downstream.
pub fn embed_corpus(
    corpus: &Corpus,
    backend: &dyn EmbedBackend,
    model: &str,
    cache_path: &Path,
    batch_size: usize,
) -> Result<EmbeddingMatrix, EmbeddingError> {
    let cache = ResponseCache::open(cache_path)?;
    let texts: Vec<String> = corpus.iter().map(render_tulu).collect();
    let hashes: Vec<String> = texts.iter().map(|t| sha256_hex(t.as_bytes())).collect();

    let mut rows: Vec<Option<Vec<f32>>> = vec![None; corpus.len()];
    let mut missing: Vec<usize> = Vec::new();
    for (idx, sample) in corpus.iter().enumerate() {
        match cache.get(model, &sample.id, &hashes[idx]) {
            Some(content) => {
                let cached: CachedVector =
                    serde_json::from_str(content).map_err(|e| ClientError::Malformed(e.to_string()))?;
                rows[idx] = Some(cached.embedding);
            }
            None => missing.push(idx),
        }
    }

    for chunk in missing.chunks(batch_size.max(1)) {
        let batch: Vec<String> = chunk.iter().map(|&i| texts[i].clone()).collect();
        let vectors = backend.embed(model, &batch)?;
        for (&idx, vector) in chunk.iter().zip(vectors) {
            let content = serde_json::to_string(&CachedVector {
                embedding: vector.clone(),
            })
            .expect("vector serialisation cannot fail");
            cache.put(model, &corpus.samples()[idx].id, &hashes[idx], &content)?;
            rows[idx] = Some(vector);
        }
    }

    let mut expected_dim: Option<usize> = None;
    let mut out = Vec::with_capacity(corpus.len());
    for (idx, row) in rows.into_iter().enumerate() {
        let row = row.expect("all rows fetched or cached");
        let dim = *expected_dim.get_or_insert(row.len());
        if row.len() != dim {
            return Err(EmbeddingError::BatchDimension {
                got: row.len(),
                expected: dim,
            });
        }
        let _ = idx;
        out.push(row);
    }
    EmbeddingMatrix::from_rows(out, corpus.ids().map(str::to_string).collect())
}
