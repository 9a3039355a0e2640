//! Long-tail diversity scores: one minus the mean cosine similarity to a
//! sample's nearest neighbours. High values mark rare, isolated samples.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::knn::NeighborTable;

#[derive(Debug, Error)]
pub enum DiversityError {
    #[error("k_div={k_div} out of range for a table with k={k}")]
    KDivOutOfRange { k_div: usize, k: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("diversity file line {line}: {message}")]
    BadLine { line: usize, message: String },
}

/// One long-tail score per sample, aligned with table order. Values live in
/// [0, 2]; [0, 1] when all similarities are non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct DiversityScores {
    pub values: Vec<f64>,
}

/// `value_n = 1 - mean(sims[n][0..k_div])`, using the `k_div` nearest
/// neighbours (similarities are stored descending, so the closest come
/// first).
pub fn long_tail_scores(
    table: &NeighborTable,
    k_div: usize,
) -> Result<DiversityScores, DiversityError> {
    if k_div == 0 || k_div > table.k() {
        return Err(DiversityError::KDivOutOfRange {
            k_div,
            k: table.k(),
        });
    }
    let values = (0..table.len())
        .map(|row| {
            let sims = &table.sims_of(row)[..k_div];
            let mean: f64 = sims.iter().map(|&s| s as f64).sum::<f64>() / k_div as f64;
            (1.0 - mean).clamp(0.0, 2.0)
        })
        .collect();
    Ok(DiversityScores { values })
}

#[derive(Serialize, Deserialize)]
struct DiversityLine {
    id: String,
    long_tail: f64,
}

pub fn save_diversity(
    scores: &DiversityScores,
    ids: &[String],
    path: &Path,
) -> Result<(), DiversityError> {
    let io_err = |source| DiversityError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut writer = BufWriter::new(file);
    for (id, &long_tail) in ids.iter().zip(&scores.values) {
        let line = serde_json::to_string(&DiversityLine {
            id: id.clone(),
            long_tail,
        })
        .expect("diversity line serialisation cannot fail");
        writeln!(writer, "{line}").map_err(io_err)?;
    }
    writer.flush().map_err(io_err)
}

pub fn load_diversity(path: &Path) -> Result<Vec<(String, f64)>, DiversityError> {
    let io_err = |source| DiversityError::Io {
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
        let parsed: DiversityLine =
            serde_json::from_str(&line).map_err(|e| DiversityError::BadLine {
                line: idx + 1,
                message: e.to_string(),
            })?;
        rows.push((parsed.id, parsed.long_tail));
    }
    Ok(rows)
}
