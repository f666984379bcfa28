//! Supervision targets from full attention: max-pooled tile scores (dense
//! and streaming two-pass), row-normalized target distributions, Top-k
//! oracle masks, and partial-query subsampling.

use rayon::prelude::*;
use thiserror::Error;

use crate::attention::{full_attention, AttentionError, HeadTensors, TileMask};
use crate::mat::{dot, Mat};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tiling::TileLayout;

/// Largest probability matrix (entries) the dense path will materialize.
pub const DENSE_PROBS_LIMIT: usize = 1 << 26;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(
        "dense path would materialize {entries} probabilities (limit {limit}); \
         use target_scores_streaming instead"
    )]
    MemoryBudget { entries: usize, limit: usize },
    #[error("score row {row} has non-positive sum {sum}")]
    DegenerateRow { row: usize, sum: f64 },
    #[error("top-k budget k={k} out of range for {n_tiles} tiles")]
    BudgetOutOfRange { k: usize, n_tiles: usize },
    #[error("scores must be square over tiles, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("non-finite score at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("distribution row {row} sums to {sum}, expected 1")]
    NotStochastic { row: usize, sum: f64 },
    #[error("negative entry at ({row}, {col})")]
    NegativeEntry { row: usize, col: usize },
    #[error(transparent)]
    Attention(#[from] AttentionError),
}

/// Real tile-score map. Rows are query tiles (possibly a subset), columns
/// always span all key tiles. Entries are finite; target scores derived from
/// probabilities are additionally positive.
#[derive(Clone, Debug, PartialEq)]
pub struct TileScores<T> {
    s: Mat<T>,
}

impl<T: Scalar> TileScores<T> {
    pub fn new(s: Mat<T>) -> Result<Self, OracleError> {
        for i in 0..s.rows() {
            for (j, &v) in s.row(i).iter().enumerate() {
                if !v.is_finite() {
                    return Err(OracleError::NonFinite { row: i, col: j });
                }
            }
        }
        Ok(Self { s })
    }

    pub fn mat(&self) -> &Mat<T> {
        &self.s
    }

    pub fn rows(&self) -> usize {
        self.s.rows()
    }

    pub fn n_tiles(&self) -> usize {
        self.s.cols()
    }
}

/// Row-stochastic tile distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetDistribution<T> {
    a: Mat<T>,
}

impl<T: Scalar> TargetDistribution<T> {
    /// Validates non-negativity and row sums within 1e-6 of one.
    pub fn new(a: Mat<T>) -> Result<Self, OracleError> {
        for i in 0..a.rows() {
            let mut sum = 0.0f64;
            for (j, &v) in a.row(i).iter().enumerate() {
                if v < T::zero() {
                    return Err(OracleError::NegativeEntry { row: i, col: j });
                }
                sum += v.to_f64_lossy();
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(OracleError::NotStochastic { row: i, sum });
            }
        }
        Ok(Self { a })
    }

    pub fn mat(&self) -> &Mat<T> {
        &self.a
    }

    pub fn rows(&self) -> usize {
        self.a.rows()
    }

    pub fn n_tiles(&self) -> usize {
        self.a.cols()
    }
}

/// Sorted distinct query-tile indices selected for supervision.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryRowSubset {
    pub indices: Vec<usize>,
    pub fraction: f64,
    pub seed: u64,
}

impl QueryRowSubset {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Uniform sample without replacement of `round(fraction * n_tiles)` query
/// tiles, clamped to at least one row. Deterministic in `seed`.
pub fn sample_query_rows(n_tiles: usize, fraction: f64, seed: u64) -> QueryRowSubset {
    assert!(fraction > 0.0 && fraction <= 1.0, "fraction must be in (0, 1]");
    assert!(n_tiles > 0);
    let m = ((fraction * n_tiles as f64).round() as usize).clamp(1, n_tiles);
    let indices = SplitMix64::new(seed).sample_distinct(n_tiles, m);
    QueryRowSubset { indices, fraction, seed }
}

/// Max-pooled tile scores from the fully materialized attention map:
/// `s[i][j] = max over (u, v) in tile block (i, j) of A*[u][v]`.
pub fn target_scores_dense<T: Scalar>(
    h: &HeadTensors<T>,
    layout: &TileLayout,
) -> Result<TileScores<T>, OracleError> {
    let n = h.n();
    if n * n > DENSE_PROBS_LIMIT {
        return Err(OracleError::MemoryBudget { entries: n * n, limit: DENSE_PROBS_LIMIT });
    }
    let probs = full_attention(h, true).probs.expect("probs requested");
    Ok(TileScores { s: max_pool_probs(&probs, layout) })
}

/// Block max-pooling of an already materialized probability matrix (token
/// order), following the layout's permutation.
pub fn max_pool_probs<T: Scalar>(probs: &Mat<T>, layout: &TileLayout) -> Mat<T> {
    let n_tiles = layout.n_tiles();
    let b = layout.tile_size();
    let perm = layout.perm();
    let mut s = Mat::zeros(n_tiles, n_tiles);
    s.data_mut().par_chunks_mut(n_tiles).enumerate().for_each(|(i, out_row)| {
        for (j, out) in out_row.iter_mut().enumerate() {
            let mut best = T::neg_infinity();
            for &u in &perm[i * b..(i + 1) * b] {
                let prow = probs.row(u);
                for &v in &perm[j * b..(j + 1) * b] {
                    if prow[v] > best {
                        best = prow[v];
                    }
                }
            }
            *out = best;
        }
    });
    s
}

/// Two-pass streaming computation of the max-pooled tile scores for the
/// selected query tiles (all tiles when `rows` is `None`).
///
/// Pass 1 sweeps the key tiles once per query tile, caching per-block maxima
/// of exp-shifted logits while maintaining per-row running (max, sum-exp)
/// statistics with online rescaling. Pass 2 normalizes the cached maxima by
/// the finalized row statistics. Peak memory is O(n_tiles^2 + n); the n x n
/// attention map is never materialized.
pub fn target_scores_streaming<T: Scalar>(
    h: &HeadTensors<T>,
    layout: &TileLayout,
    rows: Option<&QueryRowSubset>,
) -> Result<TileScores<T>, OracleError> {
    let n_tiles = layout.n_tiles();
    let b = layout.tile_size();
    let scale = h.scale();
    let perm = layout.perm();
    let selected: Vec<usize> = match rows {
        Some(sub) => sub.indices.clone(),
        None => (0..n_tiles).collect(),
    };

    let mut s = Mat::zeros(selected.len(), n_tiles);
    s.data_mut()
        .par_chunks_mut(n_tiles)
        .zip(selected.par_iter())
        .for_each(|(out_row, &qi)| {
            // Per-row running statistics for the b queries of this tile.
            let mut row_max = vec![T::neg_infinity(); b];
            let mut row_sum = vec![0.0f64; b];
            // cache[u][j]: max over keys of tile j of exp(z - row_max[u]).
            let mut cache = vec![T::zero(); b * n_tiles];
            let mut z_buf = vec![T::zero(); b];

            for kj in 0..n_tiles {
                for u in 0..b {
                    let q = h.q().row(perm[qi * b + u]);
                    let mut block_max = T::neg_infinity();
                    for (zv, &vtok) in z_buf.iter_mut().zip(&perm[kj * b..(kj + 1) * b]) {
                        let z = dot(q, h.k().row(vtok)) * scale;
                        *zv = z;
                        if z > block_max {
                            block_max = z;
                        }
                    }
                    let new_max = if block_max > row_max[u] { block_max } else { row_max[u] };
                    if new_max > row_max[u] && row_max[u] > T::neg_infinity() {
                        // Rescale previously cached maxima and the running sum.
                        let f = (row_max[u] - new_max).exp();
                        row_sum[u] *= f.to_f64_lossy();
                        for c in cache[u * n_tiles..u * n_tiles + kj].iter_mut() {
                            *c *= f;
                        }
                    }
                    row_max[u] = new_max;
                    let mut block_exp_max = T::zero();
                    for &z in z_buf.iter() {
                        let e = (z - new_max).exp();
                        row_sum[u] += e.to_f64_lossy();
                        if e > block_exp_max {
                            block_exp_max = e;
                        }
                    }
                    cache[u * n_tiles + kj] = block_exp_max;
                }
            }

            // Pass 2: normalize cached maxima by the finalized row statistics.
            for (j, out) in out_row.iter_mut().enumerate() {
                let mut best = T::neg_infinity();
                for u in 0..b {
                    let v = T::from_f64_lossy(cache[u * n_tiles + j].to_f64_lossy() / row_sum[u]);
                    if v > best {
                        best = v;
                    }
                }
                *out = best;
            }
        });

    Ok(TileScores { s })
}

/// Row-wise normalization of non-negative scores into a distribution.
pub fn row_normalize<T: Scalar>(s: &TileScores<T>) -> Result<TargetDistribution<T>, OracleError> {
    let mut a = Mat::zeros(s.rows(), s.n_tiles());
    for i in 0..s.rows() {
        let sum: f64 = s.s.row(i).iter().map(|v| v.to_f64_lossy()).sum();
        if sum <= 0.0 {
            return Err(OracleError::DegenerateRow { row: i, sum });
        }
        let inv = T::from_f64_lossy(1.0 / sum);
        for (o, &v) in a.row_mut(i).iter_mut().zip(s.s.row(i)) {
            *o = v * inv;
        }
    }
    Ok(TargetDistribution { a })
}

/// Per-row Top-k selection; ties broken toward the lower key-tile index.
pub fn topk_mask<T: Scalar>(s: &TileScores<T>, k: usize) -> Result<TileMask, OracleError> {
    let n_tiles = s.n_tiles();
    if s.rows() != n_tiles {
        return Err(OracleError::NotSquare { rows: s.rows(), cols: n_tiles });
    }
    if k == 0 || k > n_tiles {
        return Err(OracleError::BudgetOutOfRange { k, n_tiles });
    }
    let rows = (0..n_tiles).map(|i| topk_row(s.s.row(i), k)).collect();
    Ok(TileMask::from_rows(n_tiles, k, rows)?)
}

/// Indices of the k largest entries of a score row, lower index winning ties.
pub fn topk_row<T: Scalar>(row: &[T], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    // Stable descending sort keeps ascending index order among equal scores.
    order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).expect("finite scores"));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    picked
}
