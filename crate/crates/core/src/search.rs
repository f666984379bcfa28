//! Head-aware tiling search: pick the tile factorization that lets an
//! oracle Top-k mask reproduce the full-attention output most faithfully
//! over a calibration set.

use rayon::prelude::*;
use thiserror::Error;

use crate::attention::{full_attention, tile_head, AttentionError, HeadTensors};
use crate::mat::Mat;
use crate::oracle::{
    max_pool_probs, row_normalize, target_scores_streaming, topk_mask, OracleError, TileScores,
    DENSE_PROBS_LIMIT,
};
use crate::scalar::Scalar;
use crate::tiling::{enumerate_configs, build_layout, untile, LatentShape, TileConfig, TilingError};

/// Configs whose accumulated error is within this relative distance of the
/// minimum are reported as ties.
const TIE_REL_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error("calibration sample {index} has {n} tokens, shape expects {expected}")]
    SampleShapeMismatch { index: usize, n: usize, expected: usize },
    #[error("calibration sample {index} has head dim {d}, expected {expected}")]
    SampleDimMismatch { index: usize, d: usize, expected: usize },
    #[error("top-k budget k={k} out of range for {n_tiles} tiles")]
    BudgetOutOfRange { k: usize, n_tiles: usize },
    #[error(transparent)]
    Tiling(#[from] TilingError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

/// Calibration inputs for one head: samples sharing a latent shape and dim.
#[derive(Clone, Debug)]
pub struct CalibrationSample<T> {
    pub tensors: HeadTensors<T>,
    pub provenance: String,
}

#[derive(Clone, Debug)]
pub struct CalibrationSet<T> {
    pub shape: LatentShape,
    pub samples: Vec<CalibrationSample<T>>,
}

impl<T: Scalar> CalibrationSet<T> {
    pub fn new(
        shape: LatentShape,
        samples: Vec<CalibrationSample<T>>,
    ) -> Result<Self, SearchError> {
        if samples.is_empty() {
            return Err(SearchError::EmptyCalibration);
        }
        let d = samples[0].tensors.d();
        for (i, s) in samples.iter().enumerate() {
            if s.tensors.n() != shape.n() {
                return Err(SearchError::SampleShapeMismatch {
                    index: i,
                    n: s.tensors.n(),
                    expected: shape.n(),
                });
            }
            if s.tensors.d() != d {
                return Err(SearchError::SampleDimMismatch { index: i, d: s.tensors.d(), expected: d });
            }
        }
        Ok(Self { shape, samples })
    }

    pub fn d(&self) -> usize {
        self.samples[0].tensors.d()
    }
}

/// Outcome of the per-head search: the winning config, the full error table
/// in canonical config order, and every config within tolerance of the best.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub best: TileConfig,
    pub error_table: Vec<(TileConfig, f64)>,
    pub ties: Vec<TileConfig>,
}

/// Squared Frobenius error of oracle-masked sparse attention against full
/// attention for one head under one tile configuration.
pub fn head_error<T: Scalar>(
    h: &HeadTensors<T>,
    shape: &LatentShape,
    config: &TileConfig,
    k: usize,
) -> Result<f64, SearchError> {
    let full = full_attention(h, false).out;
    let n = h.n();
    let probs =
        if n * n <= DENSE_PROBS_LIMIT { full_attention(h, true).probs } else { None };
    head_error_with(h, &full, probs.as_ref(), shape, config, k)
}

/// Shared path that reuses precomputed full output and, when available, the
/// full probability matrix.
fn head_error_with<T: Scalar>(
    h: &HeadTensors<T>,
    full_out: &Mat<T>,
    probs: Option<&Mat<T>>,
    shape: &LatentShape,
    config: &TileConfig,
    k: usize,
) -> Result<f64, SearchError> {
    let layout = build_layout(shape, config)?;
    if k == 0 || k > layout.n_tiles() {
        return Err(SearchError::BudgetOutOfRange { k, n_tiles: layout.n_tiles() });
    }
    let scores = match probs {
        Some(p) => TileScores::new(max_pool_probs(p, &layout))?,
        None => target_scores_streaming(h, &layout, None)?,
    };
    let target = row_normalize(&scores)?;
    let mask = topk_mask(&TileScores::new(target.mat().clone())?, k)?;
    // Sparse attention via the dense -inf oracle route would also work; the
    // tiled kernel is the one whose output the search cares about.
    let tiled = tile_head(h, &layout)?;
    let sparse = untile(&crate::attention::sparse_attention(&tiled, &mask)?, &layout)?;
    Ok(full_out.frob_diff_sq(&sparse))
}

/// Exhaustive search over the hardware-aligned factorizations of tile size
/// `b`: error tables sum over calibration samples, the best config is the
/// argmin with ties broken by canonical (lexicographic) order.
pub fn search_tiling<T: Scalar>(
    cal: &CalibrationSet<T>,
    b: usize,
    k: usize,
) -> Result<SearchResult, SearchError> {
    let configs = enumerate_configs(b, Some(&cal.shape))?;
    let n = cal.shape.n();
    let mut totals = vec![0.0f64; configs.len()];
    for sample in &cal.samples {
        let h = &sample.tensors;
        let fa = full_attention(h, n * n <= DENSE_PROBS_LIMIT);
        let errors: Vec<Result<f64, SearchError>> = configs
            .par_iter()
            .map(|cfg| head_error_with(h, &fa.out, fa.probs.as_ref(), &cal.shape, cfg, k))
            .collect();
        for (total, err) in totals.iter_mut().zip(errors) {
            *total += err?;
        }
    }
    let mut best_idx = 0;
    for (i, &e) in totals.iter().enumerate() {
        if e < totals[best_idx] {
            best_idx = i;
        }
    }
    let best_err = totals[best_idx];
    let ties: Vec<TileConfig> = configs
        .iter()
        .zip(&totals)
        .filter(|(_, &e)| e - best_err <= TIE_REL_TOL * best_err)
        .map(|(c, _)| *c)
        .collect();
    Ok(SearchResult {
        best: configs[best_idx],
        error_table: configs.into_iter().zip(totals).collect(),
        ties,
    })
}
