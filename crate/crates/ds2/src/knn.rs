//! Exact k-nearest-neighbour tables under cosine similarity, computed by
//! blocked brute force, plus soft score distributions over a sample's
//! neighbourhood.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use thiserror::Error;

use crate::embedding::EmbeddingMatrix;

const MAGIC: &[u8; 4] = b"DS2K";
const VERSION: u32 = 1;
const NORM_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum KnnError {
    #[error("k={k} out of range for {n} samples (need 1 <= k < n)")]
    KOutOfRange { k: usize, n: usize },
    #[error("row {row} is not unit-normalised (norm {norm})")]
    NotNormalized { row: usize, norm: f64 },
    #[error("scores length {got} does not match table size {expected}")]
    ScoresLength { got: usize, expected: usize },
    #[error("score {score} at position {position} outside 0..{num_classes}")]
    ScoreOutOfRange {
        score: u8,
        position: usize,
        num_classes: usize,
    },
    #[error("neighbor subset is empty")]
    EmptySubset,
    #[error("subset slot {0} out of range for k={1}")]
    SubsetSlot(usize, usize),
    #[error("sample position {0} out of range")]
    Position(usize),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic or version in {path}")]
    BadHeader { path: String },
}

/// Per-row top-k neighbours (self excluded), similarities sorted descending,
/// exact ties broken toward the lower sample position.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborTable {
    neighbors: Vec<u32>,
    sims: Vec<f32>,
    n: usize,
    k: usize,
}

impl NeighborTable {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn neighbors_of(&self, row: usize) -> &[u32] {
        &self.neighbors[row * self.k..(row + 1) * self.k]
    }

    pub fn sims_of(&self, row: usize) -> &[f32] {
        &self.sims[row * self.k..(row + 1) * self.k]
    }
}

/// Exact top-k by dot product per row, computed in row blocks in parallel.
/// Similarities accumulate in f64 and are clamped into [-1, 1] before being
/// stored as f32.
pub fn build_neighbor_table(m: &EmbeddingMatrix, k: usize) -> Result<NeighborTable, KnnError> {
    build_neighbor_table_blocked(m, k, 1024)
}

pub fn build_neighbor_table_blocked(
    m: &EmbeddingMatrix,
    k: usize,
    block_rows: usize,
) -> Result<NeighborTable, KnnError> {
    let n = m.len();
    if k == 0 || k >= n {
        return Err(KnnError::KOutOfRange { k, n });
    }
    for row in 0..n {
        let norm = m.row_norm(row);
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(KnnError::NotNormalized { row, norm });
        }
    }

    let block_rows = block_rows.max(1);
    let mut neighbors = vec![0u32; n * k];
    let mut sims = vec![0f32; n * k];

    neighbors
        .par_chunks_mut(block_rows * k)
        .zip(sims.par_chunks_mut(block_rows * k))
        .enumerate()
        .for_each(|(block_idx, (nb_chunk, sim_chunk))| {
            let row_start = block_idx * block_rows;
            let rows_here = nb_chunk.len() / k;
            let mut top: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
            for local in 0..rows_here {
                let row = row_start + local;
                top.clear();
                let a = m.row(row);
                let mut worst = f64::NEG_INFINITY;
                let mut worst_idx = u32::MAX;
                for other in 0..n {
                    if other == row {
                        continue;
                    }
                    let sim = dot_f64(a, m.row(other));
                    // Lexicographic (sim desc, index asc): only consider
                    // candidates that beat the current k-th entry.
                    if top.len() == k
                        && (sim < worst || (sim == worst && other as u32 > worst_idx))
                    {
                        continue;
                    }
                    let pos = top
                        .partition_point(|&(s, i)| s > sim || (s == sim && i < other as u32));
                    top.insert(pos, (sim, other as u32));
                    if top.len() > k {
                        top.pop();
                    }
                    let last = top[top.len() - 1];
                    worst = last.0;
                    worst_idx = last.1;
                }
                for (slot, &(sim, idx)) in top.iter().enumerate() {
                    nb_chunk[local * k + slot] = idx;
                    sim_chunk[local * k + slot] = sim.clamp(-1.0, 1.0) as f32;
                }
            }
        });

    Ok(NeighborTable {
        neighbors,
        sims,
        n,
        k,
    })
}

fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x as f64) * (*y as f64))
        .sum()
}

/// Frequency distribution of neighbour scores over the chosen slots
/// (default: all k). The sample's own score never contributes.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftScore {
    pub probs: Vec<f64>,
}

pub fn soft_knn_score(
    table: &NeighborTable,
    scores: &[u8],
    num_classes: usize,
    position: usize,
    subset: Option<&[usize]>,
) -> Result<SoftScore, KnnError> {
    validate_scores(scores, table.len(), num_classes)?;
    if position >= table.len() {
        return Err(KnnError::Position(position));
    }
    let counts = neighbor_counts(table, scores, num_classes, position, subset)?;
    let total: u64 = counts.iter().sum();
    Ok(SoftScore {
        probs: counts
            .iter()
            .map(|&c| c as f64 / total as f64)
            .collect(),
    })
}

/// Raw per-class counts over the chosen neighbour slots.
pub(crate) fn neighbor_counts(
    table: &NeighborTable,
    scores: &[u8],
    num_classes: usize,
    position: usize,
    subset: Option<&[usize]>,
) -> Result<Vec<u64>, KnnError> {
    let row = table.neighbors_of(position);
    let mut counts = vec![0u64; num_classes];
    match subset {
        Some(slots) => {
            if slots.is_empty() {
                return Err(KnnError::EmptySubset);
            }
            for &slot in slots {
                if slot >= table.k() {
                    return Err(KnnError::SubsetSlot(slot, table.k()));
                }
                counts[scores[row[slot] as usize] as usize] += 1;
            }
        }
        None => {
            for &nb in row {
                counts[scores[nb as usize] as usize] += 1;
            }
        }
    }
    Ok(counts)
}

pub(crate) fn validate_scores(
    scores: &[u8],
    expected_len: usize,
    num_classes: usize,
) -> Result<(), KnnError> {
    if scores.len() != expected_len {
        return Err(KnnError::ScoresLength {
            got: scores.len(),
            expected: expected_len,
        });
    }
    for (position, &score) in scores.iter().enumerate() {
        if score as usize >= num_classes {
            return Err(KnnError::ScoreOutOfRange {
                score,
                position,
                num_classes,
            });
        }
    }
    Ok(())
}

/// Cache file: magic `DS2K`, u32 version, u64 N, u32 k, then N*k u32
/// indices followed by N*k f32 similarities, little-endian.
pub fn save_neighbor_table(table: &NeighborTable, path: &Path) -> Result<(), KnnError> {
    let io_err = |source| KnnError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_u32::<LittleEndian>(VERSION).map_err(io_err)?;
    w.write_u64::<LittleEndian>(table.n as u64).map_err(io_err)?;
    w.write_u32::<LittleEndian>(table.k as u32).map_err(io_err)?;
    for idx in &table.neighbors {
        w.write_u32::<LittleEndian>(*idx).map_err(io_err)?;
    }
    for sim in &table.sims {
        w.write_f32::<LittleEndian>(*sim).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn load_neighbor_table(path: &Path) -> Result<NeighborTable, KnnError> {
    let io_err = |source| KnnError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    let version = r.read_u32::<LittleEndian>().map_err(io_err)?;
    if &magic != MAGIC || version != VERSION {
        return Err(KnnError::BadHeader {
            path: path.display().to_string(),
        });
    }
    let n = r.read_u64::<LittleEndian>().map_err(io_err)? as usize;
    let k = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    let mut neighbors = vec![0u32; n * k];
    r.read_u32_into::<LittleEndian>(&mut neighbors)
        .map_err(io_err)?;
    let mut sims = vec![0f32; n * k];
    r.read_f32_into::<LittleEndian>(&mut sims).map_err(io_err)?;
    Ok(NeighborTable {
        neighbors,
        sims,
        n,
        k,
    })
}
