//! Tile-sparse attention toolkit.
//!
//! Tokens of a 3D video latent are grouped into hardware-sized tiles; each
//! query tile attends to a Top-k subset of key tiles. This crate provides
//! the pieces needed to build, train, and judge such masks at desk scale:
//!
//! - [`tiling`]: tile factorizations and token-to-tile layouts
//! - [`attention`]: reference full attention, the tile-skipping sparse
//!   kernel, a dense masked oracle, and FLOPs accounting
//! - [`oracle`]: max-pooled tile scores (dense and streaming), target
//!   distributions, Top-k masks, partial-query sampling
//! - [`estimator`]: pooled-statistics tile-score estimator with KL
//!   distillation training
//! - [`search`]: per-head tiling search over factorizations of the tile size
//! - [`metrics`]: tile recall, output error, and dispersion-bound checks
//! - [`synth`]: seeded synthetic heads with controllable structure
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below pin the common 32-bit instantiation.

pub mod attention;
pub mod estimator;
pub mod mat;
pub mod metrics;
pub mod oracle;
pub mod rng;
pub mod scalar;
pub mod search;
pub mod synth;
pub mod tiling;

pub use mat::{Mat, TiledMat};
pub use scalar::Scalar;

/// 32-bit dense matrix, the default evaluation precision.
pub type Mat32 = Mat<f32>;
/// 64-bit dense matrix for tests that want extra headroom.
pub type Mat64 = Mat<f64>;
/// 32-bit head tensors.
pub type HeadTensors32 = attention::HeadTensors<f32>;
/// 64-bit head tensors.
pub type HeadTensors64 = attention::HeadTensors<f64>;
/// 32-bit tile-score map.
pub type TileScores32 = oracle::TileScores<f32>;
/// 32-bit estimator parameters, the checkpoint precision.
pub type EstimatorParams32 = estimator::EstimatorParams<f32>;
