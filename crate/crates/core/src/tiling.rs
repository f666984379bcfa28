//! Tile configurations and token-to-tile layouts.
//!
//! A video latent of shape `(t, h, w)` is flattened into `n = t*h*w` tokens
//! in raster order (t-major, then h, then w). A tile configuration
//! `(pt, ph, pw)` with `pt*ph*pw = b` carves the grid into axis-aligned boxes
//! of `b` tokens; the layout's permutation gathers each box into a contiguous
//! run so downstream code can treat tiles as row blocks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mat::{Mat, TiledMat};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TilingError {
    #[error("latent extents must all be >= 1, got ({t}, {h}, {w})")]
    InvalidShape { t: usize, h: usize, w: usize },
    #[error("tile extents must all be >= 1, got ({pt}, {ph}, {pw})")]
    InvalidConfig { pt: usize, ph: usize, pw: usize },
    #[error("tile size must be >= 1")]
    InvalidTileSize,
    #[error("no factorization of tile size {b} divides shape ({t}, {h}, {w})")]
    EmptySearchSpace { b: usize, t: usize, h: usize, w: usize },
    #[error("tile config ({pt}, {ph}, {pw}) does not divide shape ({t}, {h}, {w})")]
    ShapeMismatch { pt: usize, ph: usize, pw: usize, t: usize, h: usize, w: usize },
    #[error("expected {expected} rows, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
}

/// The 3D token grid of a video latent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentShape {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl LatentShape {
    pub fn new(t: usize, h: usize, w: usize) -> Result<Self, TilingError> {
        if t == 0 || h == 0 || w == 0 {
            return Err(TilingError::InvalidShape { t, h, w });
        }
        Ok(Self { t, h, w })
    }

    /// Token count `t * h * w`.
    pub fn n(&self) -> usize {
        self.t * self.h * self.w
    }

    /// Raster token index of grid coordinates.
    pub fn token_index(&self, tc: usize, hc: usize, wc: usize) -> usize {
        (tc * self.h + hc) * self.w + wc
    }

    /// Inverse of [`token_index`](Self::token_index).
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let wc = idx % self.w;
        let hc = (idx / self.w) % self.h;
        let tc = idx / (self.w * self.h);
        (tc, hc, wc)
    }
}

/// Per-axis tile extents; the tile size is their product.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileConfig {
    pub pt: usize,
    pub ph: usize,
    pub pw: usize,
}

impl TileConfig {
    pub fn new(pt: usize, ph: usize, pw: usize) -> Result<Self, TilingError> {
        if pt == 0 || ph == 0 || pw == 0 {
            return Err(TilingError::InvalidConfig { pt, ph, pw });
        }
        Ok(Self { pt, ph, pw })
    }

    /// Tile size `pt * ph * pw`.
    pub fn b(&self) -> usize {
        self.pt * self.ph * self.pw
    }

    pub fn divides(&self, shape: &LatentShape) -> bool {
        shape.t.is_multiple_of(self.pt) && shape.h.is_multiple_of(self.ph) && shape.w.is_multiple_of(self.pw)
    }
}

impl std::fmt::Display for TileConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.pt, self.ph, self.pw)
    }
}

/// All ordered triples `(pt, ph, pw)` with product `b`, in lexicographic
/// order. With a shape given, only configurations dividing it are kept; an
/// empty result is then an error.
pub fn enumerate_configs(
    b: usize,
    shape: Option<&LatentShape>,
) -> Result<Vec<TileConfig>, TilingError> {
    if b == 0 {
        return Err(TilingError::InvalidTileSize);
    }
    let mut out = Vec::new();
    for pt in 1..=b {
        if !b.is_multiple_of(pt) {
            continue;
        }
        let rest = b / pt;
        for ph in 1..=rest {
            if !rest.is_multiple_of(ph) {
                continue;
            }
            let cfg = TileConfig { pt, ph, pw: rest / ph };
            if shape.is_none_or(|s| cfg.divides(s)) {
                out.push(cfg);
            }
        }
    }
    if out.is_empty() {
        let s = shape.expect("unfiltered enumeration always contains (1, 1, b)");
        return Err(TilingError::EmptySearchSpace { b, t: s.t, h: s.h, w: s.w });
    }
    Ok(out)
}

/// A token-to-tile bijection: slot `i*b + j` of the permuted order holds
/// token `perm[i*b + j]`, and the `b` slots of tile `i` form an axis-aligned
/// `(pt, ph, pw)` box of the grid. Tiles are ordered raster over boxes
/// (t-major, then h, then w), and so are tokens within a box.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TileLayout {
    shape: LatentShape,
    config: TileConfig,
    perm: Vec<usize>,
    inv: Vec<usize>,
    n_tiles: usize,
}

impl TileLayout {
    pub fn shape(&self) -> &LatentShape {
        &self.shape
    }

    pub fn config(&self) -> &TileConfig {
        &self.config
    }

    /// Slot-to-token permutation; `perm()[i*b + j]` is the token index held
    /// by row `j` of tile `i`.
    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn n_tiles(&self) -> usize {
        self.n_tiles
    }

    pub fn tile_size(&self) -> usize {
        self.config.b()
    }

    /// Tile index of a token (original raster index).
    pub fn tile_of_token(&self, token: usize) -> usize {
        self.inv[token] / self.config.b()
    }
}

/// Builds the layout for `config` over `shape`; each axis extent must divide
/// the corresponding shape extent.
pub fn build_layout(shape: &LatentShape, config: &TileConfig) -> Result<TileLayout, TilingError> {
    if !config.divides(shape) {
        return Err(TilingError::ShapeMismatch {
            pt: config.pt,
            ph: config.ph,
            pw: config.pw,
            t: shape.t,
            h: shape.h,
            w: shape.w,
        });
    }
    let n = shape.n();
    let b = config.b();
    let (nt, nh, nw) = (shape.t / config.pt, shape.h / config.ph, shape.w / config.pw);
    let mut perm = Vec::with_capacity(n);
    for bt in 0..nt {
        for bh in 0..nh {
            for bw in 0..nw {
                for dt in 0..config.pt {
                    for dh in 0..config.ph {
                        for dw in 0..config.pw {
                            perm.push(shape.token_index(
                                bt * config.pt + dt,
                                bh * config.ph + dh,
                                bw * config.pw + dw,
                            ));
                        }
                    }
                }
            }
        }
    }
    let mut inv = vec![0usize; n];
    for (slot, &tok) in perm.iter().enumerate() {
        inv[tok] = slot;
    }
    Ok(TileLayout { shape: *shape, config: *config, perm, inv, n_tiles: n / b })
}

/// Gathers rows of `x` into tile-contiguous order.
pub fn tile<T: Scalar>(x: &Mat<T>, layout: &TileLayout) -> Result<TiledMat<T>, TilingError> {
    if x.rows() != layout.shape.n() {
        return Err(TilingError::DimensionMismatch { expected: layout.shape.n(), actual: x.rows() });
    }
    let mut out = Mat::zeros(x.rows(), x.cols());
    for (slot, &tok) in layout.perm.iter().enumerate() {
        out.row_mut(slot).copy_from_slice(x.row(tok));
    }
    Ok(TiledMat::new(out, layout.n_tiles, layout.tile_size()))
}

/// Exact inverse of [`tile`].
pub fn untile<T: Scalar>(xt: &TiledMat<T>, layout: &TileLayout) -> Result<Mat<T>, TilingError> {
    let m = xt.as_mat();
    if m.rows() != layout.shape.n() {
        return Err(TilingError::DimensionMismatch { expected: layout.shape.n(), actual: m.rows() });
    }
    let mut out = Mat::zeros(m.rows(), m.cols());
    for (slot, &tok) in layout.perm.iter().enumerate() {
        out.row_mut(tok).copy_from_slice(m.row(slot));
    }
    Ok(out)
}

impl Serialize for TileLayout {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        // The permutation is recomputed on load, never stored.
        #[derive(Serialize)]
        struct Repr<'a> {
            shape: &'a LatentShape,
            config: &'a TileConfig,
        }
        Repr { shape: &self.shape, config: &self.config }.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for TileLayout {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Repr {
            shape: LatentShape,
            config: TileConfig,
        }
        let repr = Repr::deserialize(deserializer)?;
        build_layout(&repr.shape, &repr.config).map_err(serde::de::Error::custom)
    }
}
