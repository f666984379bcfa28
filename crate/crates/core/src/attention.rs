//! Reference full attention, tile-skipping sparse attention, and FLOPs
//! accounting.
//!
//! All softmaxes subtract the per-row maximum before exponentiating, and
//! sums that grow with the sequence length accumulate in f64 so that the
//! sparse and dense routes agree to well under the 1e-5 verification
//! tolerance in 32-bit arithmetic.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mat::{dot, Mat, TiledMat};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tiling::{tile, TileLayout, TilingError};

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("q, k, v must share dimensions: q {q:?}, k {k:?}, v {v:?}")]
    ShapeMismatch { q: (usize, usize), k: (usize, usize), v: (usize, usize) },
    #[error("head dimension must be >= 1")]
    EmptyHead,
    #[error("non-finite entry in {which}")]
    NonFinite { which: &'static str },
    #[error("mask row {row} selects {got} tiles, budget is {k}")]
    InvalidMaskRow { row: usize, got: usize, k: usize },
    #[error("mask budget k={k} out of range for {n_tiles} tiles")]
    BudgetOutOfRange { k: usize, n_tiles: usize },
    #[error("mask tile index {index} out of range for {n_tiles} tiles")]
    TileIndexOutOfRange { index: usize, n_tiles: usize },
    #[error("mask is over {mask_tiles} tiles but tensors have {tensor_tiles}")]
    MaskTensorMismatch { mask_tiles: usize, tensor_tiles: usize },
    #[error(transparent)]
    Tiling(#[from] TilingError),
}

/// Per-head query, key, and value matrices of shape `n x d`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadTensors<T> {
    q: Mat<T>,
    k: Mat<T>,
    v: Mat<T>,
}

impl<T: Scalar> HeadTensors<T> {
    /// Validates matching shapes and finiteness; attention on non-finite
    /// inputs is a domain error and is rejected here.
    pub fn new(q: Mat<T>, k: Mat<T>, v: Mat<T>) -> Result<Self, AttentionError> {
        let dims = |m: &Mat<T>| (m.rows(), m.cols());
        if dims(&q) != dims(&k) || dims(&q) != dims(&v) {
            return Err(AttentionError::ShapeMismatch { q: dims(&q), k: dims(&k), v: dims(&v) });
        }
        if q.cols() == 0 {
            return Err(AttentionError::EmptyHead);
        }
        for (m, which) in [(&q, "q"), (&k, "k"), (&v, "v")] {
            if !m.is_finite() {
                return Err(AttentionError::NonFinite { which });
            }
        }
        Ok(Self { q, k, v })
    }

    pub fn q(&self) -> &Mat<T> {
        &self.q
    }

    pub fn k(&self) -> &Mat<T> {
        &self.k
    }

    pub fn v(&self) -> &Mat<T> {
        &self.v
    }

    pub fn n(&self) -> usize {
        self.q.rows()
    }

    pub fn d(&self) -> usize {
        self.q.cols()
    }

    /// Softmax scale `1 / sqrt(d)`.
    pub fn scale(&self) -> T {
        T::from_f64_lossy(1.0 / (self.d() as f64).sqrt())
    }
}

/// Binary tile-selection mask with an exact per-row budget of `k` key tiles.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TileMask {
    n_tiles: usize,
    k: usize,
    rows: Vec<Vec<usize>>,
}

impl TileMask {
    /// Builds a mask from per-row selected key-tile indices. Every row must
    /// select exactly `k` distinct in-range tiles; rows are stored sorted.
    pub fn from_rows(n_tiles: usize, k: usize, rows: Vec<Vec<usize>>) -> Result<Self, AttentionError> {
        if k == 0 || k > n_tiles {
            return Err(AttentionError::BudgetOutOfRange { k, n_tiles });
        }
        if rows.len() != n_tiles {
            return Err(AttentionError::InvalidMaskRow { row: rows.len(), got: 0, k });
        }
        let mut sorted_rows = Vec::with_capacity(n_tiles);
        for (i, mut row) in rows.into_iter().enumerate() {
            row.sort_unstable();
            row.dedup();
            if row.len() != k {
                return Err(AttentionError::InvalidMaskRow { row: i, got: row.len(), k });
            }
            if let Some(&max) = row.last() {
                if max >= n_tiles {
                    return Err(AttentionError::TileIndexOutOfRange { index: max, n_tiles });
                }
            }
            sorted_rows.push(row);
        }
        Ok(Self { n_tiles, k, rows: sorted_rows })
    }

    /// Mask selecting every key tile for every query tile.
    pub fn full(n_tiles: usize) -> Self {
        let row: Vec<usize> = (0..n_tiles).collect();
        Self { n_tiles, k: n_tiles, rows: vec![row; n_tiles] }
    }

    /// Uniformly random mask with exact row budget, deterministic in `seed`.
    pub fn random(n_tiles: usize, k: usize, seed: u64) -> Result<Self, AttentionError> {
        if k == 0 || k > n_tiles {
            return Err(AttentionError::BudgetOutOfRange { k, n_tiles });
        }
        let mut rng = SplitMix64::new(seed);
        let rows = (0..n_tiles).map(|_| rng.sample_distinct(n_tiles, k)).collect();
        Ok(Self { n_tiles, k, rows })
    }

    pub fn n_tiles(&self) -> usize {
        self.n_tiles
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Selected key tiles of query tile `i`, ascending.
    pub fn row(&self, i: usize) -> &[usize] {
        &self.rows[i]
    }

    pub fn is_selected(&self, i: usize, j: usize) -> bool {
        self.rows[i].binary_search(&j).is_ok()
    }

    /// Dense 0/1 matrix view.
    pub fn to_mat<T: Scalar>(&self) -> Mat<T> {
        let mut m = Mat::zeros(self.n_tiles, self.n_tiles);
        for (i, row) in self.rows.iter().enumerate() {
            for &j in row {
                m.set(i, j, T::one());
            }
        }
        m
    }
}

impl Serialize for TileMask {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Repr<'a> {
            n_tiles: usize,
            k: usize,
            rows: &'a [Vec<usize>],
        }
        Repr { n_tiles: self.n_tiles, k: self.k, rows: &self.rows }.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for TileMask {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Repr {
            n_tiles: usize,
            k: usize,
            rows: Vec<Vec<usize>>,
        }
        let r = Repr::deserialize(deserializer)?;
        TileMask::from_rows(r.n_tiles, r.k, r.rows).map_err(serde::de::Error::custom)
    }
}

/// FLOPs accounting for one head: the two big matrix products at 2 FLOPs per
/// multiply-add, softmax excluded.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub full_flops: u64,
    pub sparse_flops: u64,
    pub sparsity: f64,
}

impl FlopsReport {
    pub fn ratio(&self) -> f64 {
        self.sparse_flops as f64 / self.full_flops as f64
    }
}

/// `full = 4*n^2*d`, `sparse = 4*n*(k*b)*d` with `b = n / n_tiles`, so the
/// sparse/full ratio is exactly `k / n_tiles`.
pub fn count_flops(n: usize, d: usize, n_tiles: usize, k: usize) -> FlopsReport {
    assert!(n > 0 && d > 0 && n_tiles > 0 && k > 0, "arguments must be positive");
    assert!(k <= n_tiles, "budget k={k} exceeds n_tiles={n_tiles}");
    assert_eq!(n % n_tiles, 0, "n_tiles must divide n");
    let b = n / n_tiles;
    let full = 4 * (n as u64) * (n as u64) * (d as u64);
    let sparse = 4 * (n as u64) * (k as u64) * (b as u64) * (d as u64);
    FlopsReport { full_flops: full, sparse_flops: sparse, sparsity: 1.0 - k as f64 / n_tiles as f64 }
}

/// Full attention output; the `n x n` probability matrix is materialized
/// only on request.
#[derive(Clone, Debug)]
pub struct FullAttention<T> {
    pub out: Mat<T>,
    pub probs: Option<Mat<T>>,
}

/// `Softmax(Q K^T / sqrt(d)) V`, row-stable.
pub fn full_attention<T: Scalar>(h: &HeadTensors<T>, keep_probs: bool) -> FullAttention<T> {
    let (n, d) = (h.n(), h.d());
    let scale = h.scale();
    let mut out = Mat::zeros(n, d);
    let mut probs = keep_probs.then(|| Mat::zeros(n, n));

    let prob_rows: Vec<Option<&mut [T]>> = match probs.as_mut() {
        Some(p) => {
            // Split the probability matrix into independent row slices.
            let mut rest = p.data_mut();
            let mut rows = Vec::with_capacity(n);
            for _ in 0..n {
                let (head_chunk, tail) = rest.split_at_mut(n);
                rows.push(Some(head_chunk));
                rest = tail;
            }
            rows
        }
        None => (0..n).map(|_| None).collect(),
    };

    out.data_mut()
        .par_chunks_mut(d)
        .zip(prob_rows.into_par_iter())
        .enumerate()
        .for_each(|(i, (out_row, prob_row))| {
            let q = h.q.row(i);
            let mut logits: Vec<T> = (0..n).map(|j| dot(q, h.k.row(j)) * scale).collect();
            softmax_in_place(&mut logits);
            weighted_value_sum(&logits, &h.v, out_row);
            if let Some(pr) = prob_row {
                pr.copy_from_slice(&logits);
            }
        });

    FullAttention { out, probs }
}

/// Tiled views of one head's tensors under a layout.
#[derive(Clone, Debug)]
pub struct TiledHead<T> {
    pub q: TiledMat<T>,
    pub k: TiledMat<T>,
    pub v: TiledMat<T>,
    scale: T,
}

impl<T: Scalar> TiledHead<T> {
    pub fn n_tiles(&self) -> usize {
        self.q.n_tiles()
    }

    pub fn tile_rows(&self) -> usize {
        self.q.tile_rows()
    }

    pub fn scale(&self) -> T {
        self.scale
    }
}

pub fn tile_head<T: Scalar>(
    h: &HeadTensors<T>,
    layout: &TileLayout,
) -> Result<TiledHead<T>, AttentionError> {
    Ok(TiledHead {
        q: tile(&h.q, layout)?,
        k: tile(&h.k, layout)?,
        v: tile(&h.v, layout)?,
        scale: h.scale(),
    })
}

/// Tile-skipping sparse attention: each query tile softmaxes over the
/// concatenation of its selected key tiles only. Unselected tiles contribute
/// exactly zero. Output stays in tiled order.
pub fn sparse_attention<T: Scalar>(
    ht: &TiledHead<T>,
    mask: &TileMask,
) -> Result<TiledMat<T>, AttentionError> {
    let n_tiles = ht.n_tiles();
    if mask.n_tiles() != n_tiles {
        return Err(AttentionError::MaskTensorMismatch {
            mask_tiles: mask.n_tiles(),
            tensor_tiles: n_tiles,
        });
    }
    let b = ht.tile_rows();
    let d = ht.q.cols();
    let scale = ht.scale();
    let mut out = Mat::zeros(n_tiles * b, d);

    out.data_mut().par_chunks_mut(b * d).enumerate().for_each(|(i, tile_out)| {
        let selected = mask.row(i);
        let m = selected.len() * b;
        let mut logits: Vec<T> = Vec::with_capacity(m);
        for u in 0..b {
            let q = ht.q.row(i, u);
            logits.clear();
            for &j in selected {
                for vrow in 0..b {
                    logits.push(dot(q, ht.k.row(j, vrow)) * scale);
                }
            }
            softmax_in_place(&mut logits);
            let out_row = &mut tile_out[u * d..(u + 1) * d];
            let mut acc = vec![0.0f64; d];
            for (sel_idx, &j) in selected.iter().enumerate() {
                for vrow in 0..b {
                    let p = logits[sel_idx * b + vrow].to_f64_lossy();
                    for (a, &vv) in acc.iter_mut().zip(ht.v.row(j, vrow)) {
                        *a += p * vv.to_f64_lossy();
                    }
                }
            }
            for (o, a) in out_row.iter_mut().zip(acc) {
                *o = T::from_f64_lossy(a);
            }
        }
    });

    Ok(TiledMat::new(out, n_tiles, b))
}

/// Equivalence oracle for [`sparse_attention`]: expands the tile mask to a
/// token-level additive mask (`-inf` outside selected tiles) and runs dense
/// stable softmax in original token order.
pub fn dense_masked_attention<T: Scalar>(
    h: &HeadTensors<T>,
    mask: &TileMask,
    layout: &TileLayout,
) -> Result<Mat<T>, AttentionError> {
    if mask.n_tiles() != layout.n_tiles() {
        return Err(AttentionError::MaskTensorMismatch {
            mask_tiles: mask.n_tiles(),
            tensor_tiles: layout.n_tiles(),
        });
    }
    let (n, d) = (h.n(), h.d());
    let scale = h.scale();
    let mut out = Mat::zeros(n, d);
    out.data_mut().par_chunks_mut(d).enumerate().for_each(|(u, out_row)| {
        let qi = layout.tile_of_token(u);
        let q = h.q.row(u);
        let mut logits: Vec<T> = (0..n)
            .map(|v| {
                if mask.is_selected(qi, layout.tile_of_token(v)) {
                    dot(q, h.k.row(v)) * scale
                } else {
                    T::neg_infinity()
                }
            })
            .collect();
        softmax_in_place(&mut logits);
        weighted_value_sum(&logits, &h.v, out_row);
    });
    Ok(out)
}

/// In-place stable softmax; `-inf` entries map to exactly zero. The
/// normalizer accumulates in f64.
pub(crate) fn softmax_in_place<T: Scalar>(logits: &mut [T]) {
    let mut m = T::neg_infinity();
    for &z in logits.iter() {
        if z > m {
            m = z;
        }
    }
    let mut denom = 0.0f64;
    for z in logits.iter_mut() {
        let e = if z.is_infinite() && z.is_sign_negative() { T::zero() } else { (*z - m).exp() };
        *z = e;
        denom += e.to_f64_lossy();
    }
    let inv = T::from_f64_lossy(1.0 / denom);
    for z in logits.iter_mut() {
        *z *= inv;
    }
}

fn weighted_value_sum<T: Scalar>(probs: &[T], v: &Mat<T>, out_row: &mut [T]) {
    let mut acc = vec![0.0f64; out_row.len()];
    for (j, &p) in probs.iter().enumerate() {
        let pv = p.to_f64_lossy();
        if pv == 0.0 {
            continue;
        }
        for (a, &vv) in acc.iter_mut().zip(v.row(j)) {
            *a += pv * vv.to_f64_lossy();
        }
    }
    for (o, a) in out_row.iter_mut().zip(acc) {
        *o = T::from_f64_lossy(a);
    }
}
