//! Statistic-aware tile-score estimator: pooled tile descriptors, per-head
//! MLP projections into a shared latent space, a bilinear predicted score
//! map, and the row-wise KL distillation loss its training minimizes.

mod io;
mod train;

pub use io::{infer_pool_mode, load_checkpoint, save_checkpoint, write_loss_history_csv};
pub use train::{
    loss_gradients, train, LossPoint, TrainConfig, TrainOutcome, TrainSample, TrainState,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{AttentionError, HeadTensors, TileMask};
use crate::mat::{Mat, TiledMat};
use crate::oracle::{topk_mask, OracleError, QueryRowSubset, TargetDistribution, TileScores};
use crate::scalar::Scalar;
use crate::tiling::{tile, TileLayout, TilingError};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("descriptor width {got} does not match projection input width {expected}")]
    WidthMismatch { got: usize, expected: usize },
    #[error("target has shape {a_rows}x{a_cols}, prediction {s_rows}x{s_cols}")]
    ShapeMismatch { a_rows: usize, a_cols: usize, s_rows: usize, s_cols: usize },
    #[error("row subset of {subset} rows cannot index {rows} available rows")]
    RowSubsetMismatch { subset: usize, rows: usize },
    #[error("head index {index} out of range for {n_heads} heads")]
    HeadOutOfRange { index: usize, n_heads: usize },
    #[error("training diverged with non-finite loss at step {step}")]
    Diverged { step: usize },
    #[error("empty calibration set")]
    EmptyCalibration,
    #[error("calibration sample {index} has head dim {d}, expected {expected}")]
    DimMismatch { index: usize, d: usize, expected: usize },
    #[error(transparent)]
    Tiling(#[from] TilingError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

/// Which per-tile statistics feed the estimator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    /// Avg ++ Max ++ Min, descriptor width `3d`.
    Triplet,
    /// Avg only, width `d`.
    Avg,
    /// Max ++ Min, width `2d`.
    MaxMin,
}

impl PoolMode {
    pub fn descriptor_width(&self, d: usize) -> usize {
        match self {
            PoolMode::Triplet => 3 * d,
            PoolMode::Avg => d,
            PoolMode::MaxMin => 2 * d,
        }
    }

    pub fn all() -> [PoolMode; 3] {
        [PoolMode::Triplet, PoolMode::Avg, PoolMode::MaxMin]
    }
}

impl std::fmt::Display for PoolMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PoolMode::Triplet => "triplet",
            PoolMode::Avg => "avg",
            PoolMode::MaxMin => "maxmin",
        };
        f.write_str(s)
    }
}

/// Coordinate-wise statistics over each tile's tokens, concatenated per the
/// pool mode. One output row per tile.
pub fn pool_descriptors<T: Scalar>(xt: &TiledMat<T>, mode: PoolMode) -> Mat<T> {
    let n_tiles = xt.n_tiles();
    let b = xt.tile_rows();
    let d = xt.cols();
    let width = mode.descriptor_width(d);
    let mut out = Mat::zeros(n_tiles, width);
    for i in 0..n_tiles {
        let mut avg = vec![T::zero(); d];
        let mut mx = xt.row(i, 0).to_vec();
        let mut mn = xt.row(i, 0).to_vec();
        for j in 0..b {
            for (c, &v) in xt.row(i, j).iter().enumerate() {
                avg[c] += v;
                if v > mx[c] {
                    mx[c] = v;
                }
                if v < mn[c] {
                    mn[c] = v;
                }
            }
        }
        let inv_b = T::from_f64_lossy(1.0 / b as f64);
        avg.iter_mut().for_each(|a| *a *= inv_b);
        let row = out.row_mut(i);
        match mode {
            PoolMode::Triplet => {
                row[..d].copy_from_slice(&avg);
                row[d..2 * d].copy_from_slice(&mx);
                row[2 * d..].copy_from_slice(&mn);
            }
            PoolMode::Avg => row.copy_from_slice(&avg),
            PoolMode::MaxMin => {
                row[..d].copy_from_slice(&mx);
                row[d..].copy_from_slice(&mn);
            }
        }
    }
    out
}

/// Two-layer MLP `y = gelu(x W1 + b1) W2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams<T> {
    pub w1: Mat<T>,
    pub b1: Vec<T>,
    pub w2: Mat<T>,
    pub b2: Vec<T>,
}

impl<T: Scalar> MlpParams<T> {
    pub fn zeros(d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        Self {
            w1: Mat::zeros(d_in, d_hidden),
            b1: vec![T::zero(); d_hidden],
            w2: Mat::zeros(d_hidden, d_out),
            b2: vec![T::zero(); d_out],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.d_in(), self.d_hidden(), self.d_out())
    }

    pub fn d_in(&self) -> usize {
        self.w1.rows()
    }

    pub fn d_hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w2.cols()
    }

    /// Forward pass keeping the activations needed by backprop.
    pub(crate) fn forward_cached(&self, x: &Mat<T>) -> MlpCache<T> {
        let mut z1 = x.mul(&self.w1);
        for i in 0..z1.rows() {
            for (v, &b) in z1.row_mut(i).iter_mut().zip(&self.b1) {
                *v += b;
            }
        }
        let a1 = z1.map(gelu);
        let mut y = a1.mul(&self.w2);
        for i in 0..y.rows() {
            for (v, &b) in y.row_mut(i).iter_mut().zip(&self.b2) {
                *v += b;
            }
        }
        MlpCache { z1, a1, y }
    }

    pub fn apply(&self, x: &Mat<T>) -> Mat<T> {
        self.forward_cached(x).y
    }

    pub fn is_finite(&self) -> bool {
        self.w1.is_finite()
            && self.w2.is_finite()
            && self.b1.iter().all(|v| v.is_finite())
            && self.b2.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug)]
pub(crate) struct MlpCache<T> {
    pub z1: Mat<T>,
    pub a1: Mat<T>,
    pub y: Mat<T>,
}

/// Independent query and key projections for one attention head. The same
/// shape doubles as gradient storage.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T> {
    pub phi_q: MlpParams<T>,
    pub phi_k: MlpParams<T>,
}

impl<T: Scalar> HeadParams<T> {
    pub fn zeros(d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        Self {
            phi_q: MlpParams::zeros(d_in, d_hidden, d_out),
            phi_k: MlpParams::zeros(d_in, d_hidden, d_out),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self { phi_q: self.phi_q.zeros_like(), phi_k: self.phi_k.zeros_like() }
    }

    pub fn is_finite(&self) -> bool {
        self.phi_q.is_finite() && self.phi_k.is_finite()
    }
}

/// Full estimator state: one projection pair per head plus the pooling mode
/// the descriptors were built with.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorParams<T> {
    pub heads: Vec<HeadParams<T>>,
    pub pool_mode: PoolMode,
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_latent: usize,
}

impl<T: Scalar> EstimatorParams<T> {
    pub fn zeros(
        n_heads: usize,
        pool_mode: PoolMode,
        d_in: usize,
        d_hidden: usize,
        d_latent: usize,
    ) -> Self {
        Self {
            heads: (0..n_heads).map(|_| HeadParams::zeros(d_in, d_hidden, d_latent)).collect(),
            pool_mode,
            d_in,
            d_hidden,
            d_latent,
        }
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    /// End-to-end mask prediction for one head: tile, pool, project, score,
    /// per-row Top-k with the oracle tie rule.
    pub fn predict_mask(
        &self,
        head: usize,
        tensors: &HeadTensors<T>,
        layout: &TileLayout,
        k: usize,
    ) -> Result<TileMask, EstimatorError> {
        let params = self
            .heads
            .get(head)
            .ok_or(EstimatorError::HeadOutOfRange { index: head, n_heads: self.heads.len() })?;
        let zq = pool_descriptors(&tile(tensors.q(), layout)?, self.pool_mode);
        let zk = pool_descriptors(&tile(tensors.k(), layout)?, self.pool_mode);
        let scores = predict_scores(&zq, &zk, params)?;
        Ok(topk_mask(&scores, k)?)
    }
}

/// Bilinear predicted tile scores
/// `S[i][j] = phi_q(zq_i) . phi_k(zk_j) / sqrt(d')`. Logits, possibly
/// negative.
pub fn predict_scores<T: Scalar>(
    zq: &Mat<T>,
    zk: &Mat<T>,
    params: &HeadParams<T>,
) -> Result<TileScores<T>, EstimatorError> {
    if zq.cols() != params.phi_q.d_in() {
        return Err(EstimatorError::WidthMismatch { got: zq.cols(), expected: params.phi_q.d_in() });
    }
    if zk.cols() != params.phi_k.d_in() {
        return Err(EstimatorError::WidthMismatch { got: zk.cols(), expected: params.phi_k.d_in() });
    }
    let yq = params.phi_q.apply(zq);
    let yk = params.phi_k.apply(zk);
    let inv = T::from_f64_lossy(1.0 / (params.phi_q.d_out() as f64).sqrt());
    Ok(TileScores::new(yq.mul_nt(&yk).scale(inv))?)
}

/// Stable row softmax of predicted logits.
pub fn predicted_distribution<T: Scalar>(s_pred: &TileScores<T>) -> Mat<T> {
    let mut out = s_pred.mat().clone();
    for i in 0..out.rows() {
        crate::attention::softmax_in_place(out.row_mut(i));
    }
    out
}

/// Pairs of (target row, prediction row) selected for the loss.
pub(crate) fn resolve_rows(
    a_rows: usize,
    s_rows: usize,
    rows: Option<&QueryRowSubset>,
) -> Result<Vec<(usize, usize)>, EstimatorError> {
    match rows {
        None => {
            if a_rows != s_rows {
                return Err(EstimatorError::RowSubsetMismatch { subset: a_rows, rows: s_rows });
            }
            Ok((0..a_rows).map(|r| (r, r)).collect())
        }
        Some(sub) => {
            if a_rows == s_rows {
                for &i in &sub.indices {
                    if i >= a_rows {
                        return Err(EstimatorError::RowSubsetMismatch {
                            subset: sub.len(),
                            rows: a_rows,
                        });
                    }
                }
                Ok(sub.indices.iter().map(|&i| (i, i)).collect())
            } else if a_rows == sub.len() {
                for &i in &sub.indices {
                    if i >= s_rows {
                        return Err(EstimatorError::RowSubsetMismatch {
                            subset: sub.len(),
                            rows: s_rows,
                        });
                    }
                }
                Ok(sub.indices.iter().enumerate().map(|(r, &i)| (r, i)).collect())
            } else {
                Err(EstimatorError::RowSubsetMismatch { subset: sub.len(), rows: a_rows })
            }
        }
    }
}

/// Mean over selected query rows of `KL(a_tgt_row || softmax(s_pred_row))`,
/// with the `0 * log 0 = 0` convention on the target side. Accumulates in
/// f64; never negative.
pub fn distill_loss<T: Scalar>(
    a_tgt: &TargetDistribution<T>,
    s_pred: &TileScores<T>,
    rows: Option<&QueryRowSubset>,
) -> Result<T, EstimatorError> {
    if a_tgt.n_tiles() != s_pred.n_tiles() {
        return Err(EstimatorError::ShapeMismatch {
            a_rows: a_tgt.rows(),
            a_cols: a_tgt.n_tiles(),
            s_rows: s_pred.rows(),
            s_cols: s_pred.n_tiles(),
        });
    }
    let pairs = resolve_rows(a_tgt.rows(), s_pred.rows(), rows)?;
    let mut total = 0.0f64;
    for &(ar, sr) in &pairs {
        total += kl_row(a_tgt.mat().row(ar), s_pred.mat().row(sr));
    }
    Ok(T::from_f64_lossy((total / pairs.len() as f64).max(0.0)))
}

/// KL of one target row against the softmax of one logit row, in f64.
pub(crate) fn kl_row<T: Scalar>(a: &[T], s: &[T]) -> f64 {
    let m = s.iter().fold(f64::NEG_INFINITY, |acc, &z| acc.max(z.to_f64_lossy()));
    let lse: f64 = s.iter().map(|&z| (z.to_f64_lossy() - m).exp()).sum::<f64>().ln() + m;
    let mut kl = 0.0f64;
    for (&av, &sv) in a.iter().zip(s) {
        let av = av.to_f64_lossy();
        if av > 0.0 {
            kl += av * (av.ln() - (sv.to_f64_lossy() - lse));
        }
    }
    kl
}

/// Tanh-form GELU.
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(0.797_884_560_802_865_4); // sqrt(2 / pi)
    let a = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_prime<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(0.797_884_560_802_865_4);
    let a = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}
