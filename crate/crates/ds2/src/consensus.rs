//! Estimation of the score transition matrix `T` and ground-truth prior `p`
//! from first/second/third-order consensus statistics over (anchor, two
//! sampled neighbours) score tuples.
//!
//! The forward model: with `T_s` the matrix whose columns are cyclically
//! shifted by `s`,
//!
//! ```text
//! v1[i]       = (T' p)[i]
//! v2[l][i]    = ((T ∘ T_l)' p)[i]          = P(y1 = i, y2 = i+l mod K)
//! v3[l][s][i] = ((T ∘ T_l ∘ T_s)' p)[i]    = P(y1 = i, y2 = i+l, y3 = i+s)
//! ```
//!
//! The solver minimises the unweighted squared distance between analytic and
//! empirical statistics over softmax-parameterised `(T, p)`, then polishes
//! with Levenberg-Marquardt and canonicalises the row labelling.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::knn::{validate_scores, NeighborTable};
use crate::util::derive_seed;

#[derive(Debug, Error)]
pub enum ConsensusError {
    #[error("need k >= 2 neighbours to draw pairs, table has k={0}")]
    NeedTwoNeighbors(usize),
    #[error(transparent)]
    Scores(#[from] crate::knn::KnnError),
    #[error("rounds must be >= 1")]
    NoRounds,
    #[error("transition matrix row {row} sums to {sum}, not 1")]
    NotRowStochastic { row: usize, sum: f64 },
    #[error("matrix entry at ({row},{col}) = {value} outside [0,1]")]
    EntryOutOfRange { row: usize, col: usize, value: f64 },
    #[error("prior sums to {0}, not 1")]
    BadPrior(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("stats are not normalised: order {order} sums to {sum}")]
    StatsNotNormalized { order: u8, sum: f64 },
}

/// Empirical or analytic consensus vectors for `K` score classes.
///
/// Layouts are flat: `v2[l * K + i]` and `v3[(l * K + s) * K + i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusStats {
    pub num_classes: usize,
    pub v1: Vec<f64>,
    pub v2: Vec<f64>,
    pub v3: Vec<f64>,
    /// Tuples tallied; 0 for analytic stats.
    pub tuple_count: u64,
}

impl ConsensusStats {
    pub fn v2_at(&self, l: usize, i: usize) -> f64 {
        self.v2[l * self.num_classes + i]
    }

    pub fn v3_at(&self, l: usize, s: usize, i: usize) -> f64 {
        self.v3[(l * self.num_classes + s) * self.num_classes + i]
    }

    fn validate_normalized(&self) -> Result<(), ConsensusError> {
        for (order, sum) in [
            (1u8, self.v1.iter().sum::<f64>()),
            (2, self.v2.iter().sum::<f64>()),
            (3, self.v3.iter().sum::<f64>()),
        ] {
            if (sum - 1.0).abs() > 1e-6 {
                return Err(ConsensusError::StatsNotNormalized { order, sum });
            }
        }
        Ok(())
    }
}

/// 0-indexed cyclic shift: the class reached from `i` by shifting `s`.
pub fn cyclic_index(i: usize, s: usize, num_classes: usize) -> usize {
    (i + s) % num_classes
}

/// The seeded neighbour-slot pair drawn for `anchor` in `round`, returned
/// with the lower slot first so the tuple roles match the brute-force
/// oracle's enumeration convention. Exposed so tests can enumerate the
/// exact tuples a run tallies.
pub fn consensus_draw(seed: u64, round: u64, anchor: u64, k: usize) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, round, anchor));
    let first = rng.random_range(0..k);
    let mut second = rng.random_range(0..k - 1);
    if second >= first {
        second += 1;
    }
    (first.min(second), first.max(second))
}

/// Tally consensus statistics: for every round and anchor, draw two distinct
/// neighbour slots and record the (anchor, nb1, nb2) score tuple.
pub fn count_consensus(
    table: &NeighborTable,
    scores: &[u8],
    num_classes: usize,
    rounds: u64,
    seed: u64,
) -> Result<ConsensusStats, ConsensusError> {
    validate_scores(scores, table.len(), num_classes)?;
    if table.k() < 2 {
        return Err(ConsensusError::NeedTwoNeighbors(table.k()));
    }
    if rounds == 0 {
        return Err(ConsensusError::NoRounds);
    }
    let k_classes = num_classes;
    let n = table.len();
    let tally_len = k_classes + k_classes * k_classes + k_classes * k_classes * k_classes;

    let merged: Vec<u64> = (0..n)
        .into_par_iter()
        .fold(
            || vec![0u64; tally_len],
            |mut tally, anchor| {
                let nbs = table.neighbors_of(anchor);
                let y1 = scores[anchor] as usize;
                for round in 0..rounds {
                    let (a, b) = consensus_draw(seed, round, anchor as u64, table.k());
                    let y2 = scores[nbs[a] as usize] as usize;
                    let y3 = scores[nbs[b] as usize] as usize;
                    let l = (y2 + k_classes - y1) % k_classes;
                    let s = (y3 + k_classes - y1) % k_classes;
                    tally[y1] += 1;
                    tally[k_classes + l * k_classes + y1] += 1;
                    tally[k_classes + k_classes * k_classes + (l * k_classes + s) * k_classes + y1] +=
                        1;
                }
                tally
            },
        )
        .reduce(
            || vec![0u64; tally_len],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                a
            },
        );

    let tuple_count = n as u64 * rounds;
    let norm = |c: &[u64]| c.iter().map(|&x| x as f64 / tuple_count as f64).collect();
    Ok(ConsensusStats {
        num_classes: k_classes,
        v1: norm(&merged[..k_classes]),
        v2: norm(&merged[k_classes..k_classes + k_classes * k_classes]),
        v3: norm(&merged[k_classes + k_classes * k_classes..]),
        tuple_count,
    })
}

fn validate_transition(t: &[Vec<f64>], p: &[f64]) -> Result<usize, ConsensusError> {
    let k = p.len();
    if t.len() != k {
        return Err(ConsensusError::Shape(format!(
            "T has {} rows but p has {k} entries",
            t.len()
        )));
    }
    for (row_idx, row) in t.iter().enumerate() {
        if row.len() != k {
            return Err(ConsensusError::Shape(format!(
                "T row {row_idx} has {} entries, expected {k}",
                row.len()
            )));
        }
        let mut sum = 0.0;
        for (col, &value) in row.iter().enumerate() {
            if !(-1e-9..=1.0 + 1e-9).contains(&value) {
                return Err(ConsensusError::EntryOutOfRange {
                    row: row_idx,
                    col,
                    value,
                });
            }
            sum += value;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(ConsensusError::NotRowStochastic { row: row_idx, sum });
        }
    }
    let psum: f64 = p.iter().sum();
    if (psum - 1.0).abs() > 1e-6 || p.iter().any(|&x| !(-1e-9..=1.0 + 1e-9).contains(&x)) {
        return Err(ConsensusError::BadPrior(psum));
    }
    Ok(k)
}

/// Exact forward evaluation of the consensus equations for given `(T, p)`.
pub fn analytic_consensus(t: &[Vec<f64>], p: &[f64]) -> Result<ConsensusStats, ConsensusError> {
    let k = validate_transition(t, p)?;
    let flat: Vec<f64> = t.iter().flatten().copied().collect();
    let mut out = vec![0.0; k + k * k + k * k * k];
    analytic_into(&flat, p, k, &mut out);
    Ok(ConsensusStats {
        num_classes: k,
        v1: out[..k].to_vec(),
        v2: out[k..k + k * k].to_vec(),
        v3: out[k + k * k..].to_vec(),
        tuple_count: 0,
    })
}

/// Forward pass writing [v1 | v2 | v3] into `out` (len k + k^2 + k^3).
fn analytic_into(t: &[f64], p: &[f64], k: usize, out: &mut [f64]) {
    out.fill(0.0);
    let (v1, rest) = out.split_at_mut(k);
    let (v2, v3) = rest.split_at_mut(k * k);
    for c in 0..k {
        let row = &t[c * k..(c + 1) * k];
        let pc = p[c];
        for i in 0..k {
            v1[i] += pc * row[i];
        }
        for l in 0..k {
            for i in 0..k {
                let pair = pc * row[i] * row[(i + l) % k];
                v2[l * k + i] += pair;
                for s in 0..k {
                    v3[(l * k + s) * k + i] += pair * row[(i + s) % k];
                }
            }
        }
    }
}

/// Gradient of the squared error w.r.t. T (flat) and p, accumulated into
/// `g_t` / `g_p`. `scratch` holds the forward pass on entry.
fn gradients(
    t: &[f64],
    p: &[f64],
    k: usize,
    target: &[f64],
    scratch: &[f64],
    g_t: &mut [f64],
    g_p: &mut [f64],
) {
    g_t.fill(0.0);
    g_p.fill(0.0);
    let e1 = &scratch[..k];
    let e2 = &scratch[k..k + k * k];
    let e3 = &scratch[k + k * k..];
    let t1 = &target[..k];
    let t2 = &target[k..k + k * k];
    let t3 = &target[k + k * k..];
    for c in 0..k {
        let row = &t[c * k..(c + 1) * k];
        let pc = p[c];
        let mut gp = 0.0;
        for i in 0..k {
            let err = 2.0 * (e1[i] - t1[i]);
            g_t[c * k + i] += err * pc;
            gp += err * row[i];
        }
        for l in 0..k {
            for i in 0..k {
                let il = (i + l) % k;
                let err = 2.0 * (e2[l * k + i] - t2[l * k + i]);
                let pair = row[i] * row[il];
                g_t[c * k + i] += err * pc * row[il];
                g_t[c * k + il] += err * pc * row[i];
                gp += err * pair;
                for s in 0..k {
                    let is = (i + s) % k;
                    let err3 = 2.0 * (e3[(l * k + s) * k + i] - t3[(l * k + s) * k + i]);
                    g_t[c * k + i] += err3 * pc * row[il] * row[is];
                    g_t[c * k + il] += err3 * pc * row[i] * row[is];
                    g_t[c * k + is] += err3 * pc * pair;
                    gp += err3 * pair * row[is];
                }
            }
        }
        g_p[c] += gp;
    }
}

fn softmax_rows(theta: &[f64], k: usize, rows: usize, out: &mut [f64]) {
    for r in 0..rows {
        let row = &theta[r * k..(r + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &x) in out[r * k..(r + 1) * k].iter_mut().zip(row) {
            *o = (x - max).exp();
            sum += *o;
        }
        for o in &mut out[r * k..(r + 1) * k] {
            *o /= sum;
        }
    }
}

/// Chain the euclidean gradient through a softmax row in place.
fn softmax_chain(values: &[f64], grad: &mut [f64]) {
    let inner: f64 = values.iter().zip(grad.iter()).map(|(v, g)| v * g).sum();
    for (g, &v) in grad.iter_mut().zip(values) {
        *g = v * (*g - inner);
    }
}

/// Solver configuration. The learning rate follows a cosine decay over
/// `max_iters`; each restart is polished with Levenberg-Marquardt steps on
/// the residual vector before the best restart is chosen by
/// (residual, restart index).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveOptions {
    pub restarts: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            restarts: 10,
            max_iters: 1500,
            tol: 1e-8,
            learning_rate: 0.1,
            seed: 0,
        }
    }
}

/// The estimated transition matrix and prior. Rows of `t` sum to one by
/// construction of the parameterisation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransitionEstimate {
    pub t: Vec<Vec<f64>>,
    pub p: Vec<f64>,
    /// Final squared-error objective of the winning restart.
    pub residual: f64,
    /// False when no restart got below `tol`; the best found is returned
    /// anyway. Sampled statistics normally leave this false because the
    /// noise floor exceeds `tol`.
    pub converged: bool,
    /// Index of the winning restart (0 = diagonal-dominant init).
    pub restart: usize,
}

struct RestartResult {
    residual: f64,
    t: Vec<f64>,
    p: Vec<f64>,
}

/// Fit `(T, p)` to consensus statistics by reparameterised gradient descent
/// with momentum/second-moment scaling, one diagonal-dominant start plus
/// `restarts` random starts, LM polish, and row-label canonicalisation
/// toward maximum diagonal mass.
pub fn solve_transition(
    stats: &ConsensusStats,
    opts: &SolveOptions,
) -> Result<TransitionEstimate, ConsensusError> {
    stats.validate_normalized()?;
    let k = stats.num_classes;
    let mut target = Vec::with_capacity(k + k * k + k * k * k);
    target.extend_from_slice(&stats.v1);
    target.extend_from_slice(&stats.v2);
    target.extend_from_slice(&stats.v3);

    let mut inits: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(opts.restarts + 1);
    // Diagonal-dominant start breaks the row-relabelling symmetry toward the
    // natural labelling; p starts at the observed marginal.
    let mut theta0 = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let value = if i == j { 0.7 + 0.3 / k as f64 } else { 0.3 / k as f64 };
            theta0[i * k + j] = value.ln();
        }
    }
    let phi0: Vec<f64> = stats.v1.iter().map(|&x| x.max(1e-8).ln()).collect();
    inits.push((theta0, phi0));
    for r in 0..opts.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, 0x51a7, r as u64));
        let theta: Vec<f64> = (0..k * k).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let phi: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        inits.push((theta, phi));
    }

    let results: Vec<RestartResult> = inits
        .into_par_iter()
        .map(|(theta, phi)| run_restart(theta, phi, k, &target, opts))
        .collect();

    let best = results
        .iter()
        .enumerate()
        .min_by(|(ia, a), (ib, b)| {
            a.residual
                .partial_cmp(&b.residual)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(ia.cmp(ib))
        })
        .map(|(idx, _)| idx)
        .expect("at least the diagonal-dominant restart exists");

    let winner = &results[best];
    let (t_canon, p_canon) = canonicalize(&winner.t, &winner.p, k);
    let t_rows: Vec<Vec<f64>> = (0..k).map(|i| t_canon[i * k..(i + 1) * k].to_vec()).collect();
    Ok(TransitionEstimate {
        t: t_rows,
        p: p_canon,
        residual: winner.residual,
        converged: winner.residual < opts.tol,
        restart: best,
    })
}

fn run_restart(
    mut theta: Vec<f64>,
    mut phi: Vec<f64>,
    k: usize,
    target: &[f64],
    opts: &SolveOptions,
) -> RestartResult {
    let dim = k * k + k;
    let mut t = vec![0.0; k * k];
    let mut p = vec![0.0; k];
    let mut scratch = vec![0.0; target.len()];
    let mut g_t = vec![0.0; k * k];
    let mut g_p = vec![0.0; k];
    let mut m = vec![0.0; dim];
    let mut v = vec![0.0; dim];
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);

    for iter in 0..opts.max_iters {
        softmax_rows(&theta, k, k, &mut t);
        softmax_rows(&phi, k, 1, &mut p);
        analytic_into(&t, &p, k, &mut scratch);
        let obj: f64 = scratch
            .iter()
            .zip(target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if obj < opts.tol {
            break;
        }
        gradients(&t, &p, k, target, &scratch, &mut g_t, &mut g_p);
        for row in 0..k {
            softmax_chain(&t[row * k..(row + 1) * k], &mut g_t[row * k..(row + 1) * k]);
        }
        softmax_chain(&p, &mut g_p);

        let progress = iter as f64 / opts.max_iters as f64;
        let lr = opts.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        let correction1 = 1.0 - b1.powi(iter as i32 + 1);
        let correction2 = 1.0 - b2.powi(iter as i32 + 1);
        for (slot, grad) in g_t.iter().chain(g_p.iter()).enumerate() {
            m[slot] = b1 * m[slot] + (1.0 - b1) * grad;
            v[slot] = b2 * v[slot] + (1.0 - b2) * grad * grad;
            let step = lr * (m[slot] / correction1) / ((v[slot] / correction2).sqrt() + eps);
            if slot < k * k {
                theta[slot] -= step;
            } else {
                phi[slot - k * k] -= step;
            }
        }
    }

    let residual = lm_polish(&mut theta, &mut phi, k, target, opts.tol);
    softmax_rows(&theta, k, k, &mut t);
    softmax_rows(&phi, k, 1, &mut p);
    RestartResult { residual, t, p }
}

/// Levenberg-Marquardt on the residual vector in softmax parameter space.
/// The gauge directions (adding a constant per softmax block) are handled by
/// the ridge term.
fn lm_polish(theta: &mut [f64], phi: &mut [f64], k: usize, target: &[f64], tol: f64) -> f64 {
    let dim = k * k + k;
    let res_len = target.len();
    let mut t = vec![0.0; k * k];
    let mut p = vec![0.0; k];
    let mut scratch = vec![0.0; res_len];

    let eval = |theta: &[f64], phi: &[f64], t: &mut [f64], p: &mut [f64], scratch: &mut [f64]| -> Vec<f64> {
        softmax_rows(theta, k, k, t);
        softmax_rows(phi, k, 1, p);
        analytic_into(t, p, k, scratch);
        scratch.iter().zip(target).map(|(a, b)| a - b).collect()
    };

    let mut lambda = 1e-3;
    let mut residual = {
        let r = eval(theta, phi, &mut t, &mut p, &mut scratch);
        r.iter().map(|x| x * x).sum::<f64>()
    };

    for _ in 0..60 {
        if residual < tol * 1e-4 {
            break;
        }
        let r0 = eval(theta, phi, &mut t, &mut p, &mut scratch);
        // Forward-difference Jacobian, column per parameter.
        let eps = 1e-7;
        let mut jac = vec![0.0; res_len * dim];
        for col in 0..dim {
            let (mut th2, mut ph2) = (theta.to_vec(), phi.to_vec());
            if col < k * k {
                th2[col] += eps;
            } else {
                ph2[col - k * k] += eps;
            }
            let r1 = eval(&th2, &ph2, &mut t, &mut p, &mut scratch);
            for row in 0..res_len {
                jac[row * dim + col] = (r1[row] - r0[row]) / eps;
            }
        }
        // Normal equations.
        let mut jtj = vec![0.0; dim * dim];
        let mut jtr = vec![0.0; dim];
        for row in 0..res_len {
            let jrow = &jac[row * dim..(row + 1) * dim];
            let rv = r0[row];
            for a in 0..dim {
                jtr[a] += jrow[a] * rv;
                for b in a..dim {
                    jtj[a * dim + b] += jrow[a] * jrow[b];
                }
            }
        }
        for a in 0..dim {
            for b in 0..a {
                jtj[a * dim + b] = jtj[b * dim + a];
            }
        }

        let mut improved = false;
        for _ in 0..16 {
            let mut system = jtj.clone();
            for d in 0..dim {
                system[d * dim + d] += lambda;
            }
            let rhs: Vec<f64> = jtr.iter().map(|x| -x).collect();
            let delta = match cholesky_solve(&mut system, &rhs, dim) {
                Some(delta) => delta,
                None => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let (mut th2, mut ph2) = (theta.to_vec(), phi.to_vec());
            for (slot, d) in delta.iter().enumerate() {
                if slot < k * k {
                    th2[slot] += d;
                } else {
                    ph2[slot - k * k] += d;
                }
            }
            let r1 = eval(&th2, &ph2, &mut t, &mut p, &mut scratch);
            let new_residual: f64 = r1.iter().map(|x| x * x).sum();
            if new_residual < residual {
                theta.copy_from_slice(&th2);
                phi.copy_from_slice(&ph2);
                residual = new_residual;
                lambda = (lambda * 0.3).max(1e-12);
                improved = true;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    residual
}

/// Solve (A)x = b for symmetric positive-definite A, in place.
fn cholesky_solve(a: &mut [f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    for col in 0..n {
        for row in col..n {
            let mut sum = a[row * n + col];
            for idx in 0..col {
                sum -= a[row * n + idx] * a[col * n + idx];
            }
            if row == col {
                if sum <= 0.0 {
                    return None;
                }
                a[col * n + col] = sum.sqrt();
            } else {
                a[row * n + col] = sum / a[col * n + col];
            }
        }
    }
    let mut x = b.to_vec();
    for row in 0..n {
        for idx in 0..row {
            x[row] -= a[row * n + idx] * x[idx];
        }
        x[row] /= a[row * n + row];
    }
    for row in (0..n).rev() {
        for idx in row + 1..n {
            x[row] -= a[idx * n + row] * x[idx];
        }
        x[row] /= a[row * n + row];
    }
    Some(x)
}

/// The objective is exactly invariant under simultaneous row permutation of
/// `T` and `p`, so pick the representative with maximum diagonal mass. This
/// keeps the lowest-residual selection well defined while restoring the
/// natural labelling.
fn canonicalize(t: &[f64], p: &[f64], k: usize) -> (Vec<f64>, Vec<f64>) {
    let mut best_perm: Vec<usize> = (0..k).collect();
    let mut best_trace = f64::NEG_INFINITY;
    let mut perm: Vec<usize> = (0..k).collect();
    permute_search(&mut perm, 0, t, k, &mut best_trace, &mut best_perm);
    let mut t_out = vec![0.0; k * k];
    let mut p_out = vec![0.0; k];
    for i in 0..k {
        let src = best_perm[i];
        t_out[i * k..(i + 1) * k].copy_from_slice(&t[src * k..(src + 1) * k]);
        p_out[i] = p[src];
    }
    (t_out, p_out)
}

fn permute_search(
    perm: &mut Vec<usize>,
    depth: usize,
    t: &[f64],
    k: usize,
    best_trace: &mut f64,
    best_perm: &mut Vec<usize>,
) {
    if depth == k {
        let trace: f64 = (0..k).map(|i| t[perm[i] * k + i]).sum();
        if trace > *best_trace {
            *best_trace = trace;
            best_perm.copy_from_slice(perm);
        }
        return;
    }
    for swap in depth..k {
        perm.swap(depth, swap);
        permute_search(perm, depth + 1, t, k, best_trace, best_perm);
        perm.swap(depth, swap);
    }
}

/// Squared-error objective of arbitrary `(T, p)` against statistics; used by
/// diagnostics and the permutation-ambiguity tests.
pub fn transition_objective(
    t: &[Vec<f64>],
    p: &[f64],
    stats: &ConsensusStats,
) -> Result<f64, ConsensusError> {
    let analytic = analytic_consensus(t, p)?;
    if analytic.num_classes != stats.num_classes {
        return Err(ConsensusError::Shape(format!(
            "stats have K={} but (T,p) have K={}",
            stats.num_classes, analytic.num_classes
        )));
    }
    let sq = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    Ok(sq(&analytic.v1, &stats.v1) + sq(&analytic.v2, &stats.v2) + sq(&analytic.v3, &stats.v3))
}

/// Expected misrated count per observed class: `N_i * (1 - T[i][i] p[i] / q[i])`
/// with `q` the empirical marginal, clamped into `[0, N_i]` and rounded.
pub fn per_class_noise(estimate: &TransitionEstimate, observed_counts: &[usize]) -> Vec<usize> {
    let total: usize = observed_counts.iter().sum();
    observed_counts
        .iter()
        .enumerate()
        .map(|(i, &n_i)| {
            if n_i == 0 {
                return 0;
            }
            let q_i = n_i as f64 / total as f64;
            let clean = estimate.t[i][i] * estimate.p[i] / q_i;
            let raw = n_i as f64 * (1.0 - clean);
            raw.clamp(0.0, n_i as f64).round() as usize
        })
        .collect()
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::embedding::{normalize_rows, EmbeddingMatrix};
    use crate::knn::build_neighbor_table;

    #[test]
    fn cyclic_index_examples() {
        assert_eq!(cyclic_index(5, 1, 6), 0);
        assert_eq!(cyclic_index(3, 0, 6), 3);
        assert_eq!(cyclic_index(2, 3, 6), 5);
    }

    fn identity(k: usize) -> Vec<Vec<f64>> {
        (0..k)
            .map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect()
    }

    #[test]
    fn analytic_identity_recovers_prior() {
        let p = vec![0.1, 0.2, 0.3, 0.15, 0.05, 0.2];
        let stats = analytic_consensus(&identity(6), &p).expect("stats");
        for i in 0..6 {
            assert!((stats.v1[i] - p[i]).abs() < 1e-15);
            assert!((stats.v2_at(0, i) - p[i]).abs() < 1e-15);
            assert!((stats.v3_at(0, 0, i) - p[i]).abs() < 1e-15);
        }
        for l in 1..6 {
            for i in 0..6 {
                assert_eq!(stats.v2_at(l, i), 0.0);
            }
        }
    }

    #[test]
    fn analytic_k2_hand_values() {
        let t = vec![vec![0.9, 0.1], vec![0.2, 0.8]];
        let p = vec![0.5, 0.5];
        let stats = analytic_consensus(&t, &p).expect("stats");
        assert!((stats.v1[0] - 0.55).abs() < 1e-12);
        assert!((stats.v1[1] - 0.45).abs() < 1e-12);
        assert!((stats.v2_at(0, 0) - 0.425).abs() < 1e-12);
        assert!((stats.v2_at(0, 1) - 0.325).abs() < 1e-12);
        assert!((stats.v2_at(1, 0) - 0.125).abs() < 1e-12);
        assert!((stats.v2_at(1, 1) - 0.125).abs() < 1e-12);
    }

    #[test]
    fn analytic_conserves_probability() {
        use rand::prelude::*;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let k = rng.random_range(2..7);
            let t: Vec<Vec<f64>> = (0..k).map(|_| random_simplex(&mut rng, k)).collect();
            let p = random_simplex(&mut rng, k);
            let stats = analytic_consensus(&t, &p).expect("stats");
            assert!((stats.v1.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!((stats.v2.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!((stats.v3.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    fn random_simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
        let mut v: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
        let sum: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= sum);
        v
    }

    /// Monte-Carlo oracle for the analytic equations: draw (y, y1, y2, y3)
    /// from (p, T) directly and tally, independent of `analytic_into`.
    #[test]
    fn analytic_matches_monte_carlo_sampling() {
        let t = vec![vec![0.9, 0.1], vec![0.2, 0.8]];
        let p = vec![0.5, 0.5];
        let stats = analytic_consensus(&t, &p).expect("stats");
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let draws = 400_000usize;
        let k = 2;
        let mut v2 = vec![0u64; k * k];
        let mut v3 = vec![0u64; k * k * k];
        let draw_class = |rng: &mut ChaCha8Rng, dist: &[f64]| -> usize {
            let u: f64 = rng.random_range(0.0..1.0);
            let mut acc = 0.0;
            for (idx, &w) in dist.iter().enumerate() {
                acc += w;
                if u < acc {
                    return idx;
                }
            }
            dist.len() - 1
        };
        for _ in 0..draws {
            let y = draw_class(&mut rng, &p);
            let y1 = draw_class(&mut rng, &t[y]);
            let y2 = draw_class(&mut rng, &t[y]);
            let y3 = draw_class(&mut rng, &t[y]);
            let l = (y2 + k - y1) % k;
            let s = (y3 + k - y1) % k;
            v2[l * k + y1] += 1;
            v3[(l * k + s) * k + y1] += 1;
        }
        // 4 sigma on a Bernoulli(~0.4) at 400k draws is ~0.003.
        for l in 0..k {
            for i in 0..k {
                let emp = v2[l * k + i] as f64 / draws as f64;
                assert!(
                    (emp - stats.v2_at(l, i)).abs() < 0.004,
                    "v2[{l}][{i}] emp {emp} vs {}",
                    stats.v2_at(l, i)
                );
            }
        }
        for l in 0..k {
            for s in 0..k {
                for i in 0..k {
                    let emp = v3[(l * k + s) * k + i] as f64 / draws as f64;
                    assert!((emp - stats.v3_at(l, s, i)).abs() < 0.004);
                }
            }
        }
    }

    fn tight_cluster_table(scores: &[u8]) -> NeighborTable {
        // Points on a tiny arc so that everyone's neighbours are everyone
        // else; geometry does not matter for these tally tests.
        let n = scores.len();
        let rows: Vec<Vec<f32>> = (0..n)
            .map(|i| {
                let angle = 1e-3 * i as f32;
                vec![angle.cos(), angle.sin()]
            })
            .collect();
        let ids = (0..n).map(|i| format!("s{i}")).collect();
        let m = normalize_rows(EmbeddingMatrix::from_rows(rows, ids).expect("matrix"))
            .expect("normalize");
        build_neighbor_table(&m, (n - 1).min(4)).expect("table")
    }

    #[test]
    fn count_consensus_unanimity() {
        let scores = vec![2u8; 30];
        let table = tight_cluster_table(&scores);
        let stats = count_consensus(&table, &scores, 6, 2, 7).expect("stats");
        assert_eq!(stats.v1[2], 1.0);
        assert_eq!(stats.v2_at(0, 2), 1.0);
        assert_eq!(stats.v3_at(0, 0, 2), 1.0);
        assert_eq!(stats.tuple_count, 60);
    }

    #[test]
    fn count_consensus_matches_hand_enumeration_of_draws() {
        let scores = vec![1u8, 4, 2];
        let table = tight_cluster_table(&scores);
        assert_eq!(table.k(), 2);
        let seed = 123;
        let stats = count_consensus(&table, &scores, 6, 1, seed).expect("stats");

        let k_classes = 6usize;
        let mut v1 = vec![0.0; 6];
        let mut v2 = vec![0.0; 36];
        let mut v3 = vec![0.0; 216];
        for anchor in 0..3u64 {
            let (a, b) = consensus_draw(seed, 0, anchor, table.k());
            let nbs = table.neighbors_of(anchor as usize);
            let y1 = scores[anchor as usize] as usize;
            let y2 = scores[nbs[a] as usize] as usize;
            let y3 = scores[nbs[b] as usize] as usize;
            let l = (y2 + k_classes - y1) % k_classes;
            let s = (y3 + k_classes - y1) % k_classes;
            v1[y1] += 1.0 / 3.0;
            v2[l * 6 + y1] += 1.0 / 3.0;
            v3[(l * 6 + s) * 6 + y1] += 1.0 / 3.0;
        }
        assert_eq!(stats.v1, v1);
        assert_eq!(stats.v2, v2);
        assert_eq!(stats.v3, v3);
    }

    #[test]
    fn count_consensus_deterministic_and_seed_sensitive() {
        let scores: Vec<u8> = (0..40).map(|i| (i % 6) as u8).collect();
        let table = tight_cluster_table(&scores);
        let a = count_consensus(&table, &scores, 6, 3, 11).expect("stats");
        let b = count_consensus(&table, &scores, 6, 3, 11).expect("stats");
        assert_eq!(a, b);
        let c = count_consensus(&table, &scores, 6, 3, 12).expect("stats");
        assert_ne!(a, c);
    }

    #[test]
    fn solve_recovers_identity_from_clean_stats() {
        let p = vec![0.1, 0.25, 0.2, 0.15, 0.1, 0.2];
        let stats = analytic_consensus(&identity(6), &p).expect("stats");
        let est = solve_transition(&stats, &SolveOptions {
            restarts: 2,
            ..Default::default()
        })
        .expect("solve");
        for i in 0..6 {
            for j in 0..6 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (est.t[i][j] - want).abs() < 0.02,
                    "T[{i}][{j}] = {}",
                    est.t[i][j]
                );
            }
            assert!((est.p[i] - p[i]).abs() < 0.02);
        }
        assert!(est.converged, "residual {} should sit below tol", est.residual);
    }

    #[test]
    fn solve_recovers_k2_example() {
        let t = vec![vec![0.9, 0.1], vec![0.2, 0.8]];
        let p = vec![0.5, 0.5];
        let stats = analytic_consensus(&t, &p).expect("stats");
        let est = solve_transition(&stats, &SolveOptions::default()).expect("solve");
        for i in 0..2 {
            for j in 0..2 {
                assert!(
                    (est.t[i][j] - t[i][j]).abs() < 0.03,
                    "T[{i}][{j}] = {} vs {}",
                    est.t[i][j],
                    t[i][j]
                );
            }
        }
    }

    #[test]
    fn true_solution_beats_column_permutations() {
        let t = vec![
            vec![0.8, 0.15, 0.05],
            vec![0.1, 0.7, 0.2],
            vec![0.05, 0.25, 0.7],
        ];
        let p = vec![0.3, 0.45, 0.25];
        let stats = analytic_consensus(&t, &p).expect("stats");
        let base = transition_objective(&t, &p, &stats).expect("objective");
        assert!(base < 1e-20);

        let perms = [
            [0usize, 1, 2],
            [0, 2, 1],
            [1, 0, 2],
            [1, 2, 0],
            [2, 0, 1],
            [2, 1, 0],
        ];
        for perm in perms {
            let permuted: Vec<Vec<f64>> = t
                .iter()
                .map(|row| perm.iter().map(|&j| row[j]).collect())
                .collect();
            let obj = transition_objective(&permuted, &p, &stats).expect("objective");
            assert!(
                base <= obj + 1e-8,
                "column permutation {perm:?} should not fit better"
            );
        }
    }

    #[test]
    fn row_permuted_solutions_share_the_objective() {
        let t = vec![
            vec![0.8, 0.15, 0.05],
            vec![0.1, 0.7, 0.2],
            vec![0.05, 0.25, 0.7],
        ];
        let p = vec![0.3, 0.45, 0.25];
        let stats = analytic_consensus(&t, &p).expect("stats");
        let perm = [2usize, 0, 1];
        let t_perm: Vec<Vec<f64>> = perm.iter().map(|&i| t[i].clone()).collect();
        let p_perm: Vec<f64> = perm.iter().map(|&i| p[i]).collect();
        let obj = transition_objective(&t_perm, &p_perm, &stats).expect("objective");
        assert!(obj < 1e-20, "row relabelling is a gauge freedom, got {obj}");
    }

    #[test]
    fn per_class_noise_examples() {
        // Clean case: T = I, p = q.
        let est = TransitionEstimate {
            t: identity(2),
            p: vec![0.25, 0.75],
            residual: 0.0,
            converged: true,
            restart: 0,
        };
        assert_eq!(per_class_noise(&est, &[25, 75]), vec![0, 0]);

        // Bayes threshold example: N_i=1000, T_ii=0.8, p_i=0.3, q_i=0.4.
        let est = TransitionEstimate {
            t: vec![vec![0.8, 0.2], vec![0.2, 0.8]],
            p: vec![0.3, 0.7],
            residual: 0.0,
            converged: true,
            restart: 0,
        };
        let noise = per_class_noise(&est, &[1000, 1500]);
        assert_eq!(noise[0], 400);

        // Clamp when T_ii * p_i exceeds q_i.
        let est = TransitionEstimate {
            t: vec![vec![0.9, 0.1], vec![0.1, 0.9]],
            p: vec![0.9, 0.1],
            residual: 0.0,
            converged: true,
            restart: 0,
        };
        let noise = per_class_noise(&est, &[100, 900]);
        assert_eq!(noise[0], 0);

        // Empty class yields zero.
        assert_eq!(per_class_noise(&est, &[0, 1000])[0], 0);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let bad_t = vec![vec![0.9, 0.2], vec![0.2, 0.8]];
        assert!(analytic_consensus(&bad_t, &[0.5, 0.5]).is_err());
        let t = identity(2);
        assert!(analytic_consensus(&t, &[0.7, 0.7]).is_err());
    }
}
