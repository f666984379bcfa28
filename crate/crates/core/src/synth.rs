//! Seeded synthetic attention heads with controllable spatiotemporal
//! structure, standing in for a video backbone at desk scale.
//!
//! Structured kinds plant a shared unit direction per target key group into
//! both Q and K rows, calibrated so the planted same-group logit equals
//! `strength` after the attention scale; isotropic noise is added on top.
//! Planted directions live in the lower "active" half of the head dims. The
//! upper dims are inactive channels, split into a query half and a key half:
//! each side carries junk energy at the planted amplitude while the opposite
//! side holds zeros there, so logits are untouched but per-tile extreme
//! statistics see realistic off-pattern energy. Mixture heads draw their
//! sink keys with boosted row norm against a correspondingly shrunk query
//! component, leaving sink attention mass unchanged but making sink tiles
//! stand out to extreme statistics.
//!
//! All draws go through the deterministic generator in [`crate::rng`], so a
//! spec reproduces the same tensors bit for bit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{AttentionError, HeadTensors};
use crate::mat::Mat;
use crate::rng::{derive_seed, SplitMix64};
use crate::scalar::Scalar;
use crate::search::{CalibrationSample, CalibrationSet, SearchError};
use crate::tiling::{enumerate_configs, LatentShape, TileConfig, TilingError};

/// Spatial block edge used by the local patterns' key groups.
const LOCAL_BLOCK: usize = 4;
/// Number of global sink tokens planted by the mixture pattern.
const SINK_COUNT: usize = 4;
/// Sink key rows are scaled up by this factor (queries down by the same),
/// keeping sink logits fixed while raising sink visibility in extremes.
const SINK_NORM_BOOST: f64 = 1.6;
/// Logit variance for the isotropic pattern, kept small so attention stays
/// near uniform.
const ISOTROPIC_LOGIT_VAR: f64 = 0.1;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Tiling(#[from] TilingError),
}

/// Attention structure planted into a generated head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Mass concentrated within a spatial block of the same frame.
    LocalSpatial,
    /// Mass concentrated on tokens at the same (h, w) across frames.
    TemporalStride,
    /// A few global sink columns plus local in-frame mass.
    GlobalMixture,
    /// I.i.d. Gaussian Q/K/V, near-uniform attention.
    Isotropic,
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            HeadKind::LocalSpatial => "local_spatial",
            HeadKind::TemporalStride => "temporal_stride",
            HeadKind::GlobalMixture => "global_mixture",
            HeadKind::Isotropic => "isotropic",
        };
        f.write_str(s)
    }
}

/// Everything needed to reproduce one synthetic head.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadPatternSpec {
    pub kind: HeadKind,
    pub shape: LatentShape,
    pub d: usize,
    pub seed: u64,
    /// Planted same-group logit; ignored by the isotropic kind.
    pub strength: f64,
    /// Additive Gaussian noise scale on Q and K rows.
    pub noise: f64,
}

impl HeadPatternSpec {
    pub fn new(kind: HeadKind, shape: LatentShape, d: usize, seed: u64) -> Self {
        Self { kind, shape, d, seed, strength: 8.0, noise: 0.25 }
    }

    pub fn with_strength(mut self, strength: f64) -> Self {
        assert!(strength >= 0.0);
        self.strength = strength;
        self
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        assert!(noise >= 0.0);
        self.noise = noise;
        self
    }
}

fn unit_vec(rng: &mut SplitMix64, d: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| rng.next_normal()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        v[0] = 1.0;
        return v;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Inactive channels per side; the remaining low dims carry the signal.
fn nuisance_split(d: usize) -> (usize, usize) {
    let per_side = d / 4;
    (d - 2 * per_side, per_side)
}

/// Amplitude putting the planted same-group logit at `strength` after the
/// `1/sqrt(d)` attention scale: `a^2 / sqrt(d) = strength`.
fn plant_amplitude(strength: f64, d: usize) -> f64 {
    (strength * (d as f64).sqrt()).sqrt()
}

/// Key-group index of each token: same (h, w) site for temporal stride,
/// per-frame spatial blocks for the local patterns.
fn group_ids(kind: HeadKind, shape: &LatentShape) -> (Vec<usize>, usize) {
    let n = shape.n();
    match kind {
        HeadKind::TemporalStride => {
            let ids = (0..n).map(|tok| {
                let (_, hc, wc) = shape.coords(tok);
                hc * shape.w + wc
            });
            (ids.collect(), shape.h * shape.w)
        }
        HeadKind::LocalSpatial | HeadKind::GlobalMixture => {
            let bh = LOCAL_BLOCK.min(shape.h);
            let bw = LOCAL_BLOCK.min(shape.w);
            let nh = shape.h.div_ceil(bh);
            let nw = shape.w.div_ceil(bw);
            let ids = (0..n).map(|tok| {
                let (tc, hc, wc) = shape.coords(tok);
                (tc * nh + hc / bh) * nw + wc / bw
            });
            (ids.collect(), shape.t * nh * nw)
        }
        HeadKind::Isotropic => ((0..n).map(|_| 0).collect(), 1),
    }
}

/// Generates one head. Deterministic in the spec.
pub fn generate_head<T: Scalar>(spec: &HeadPatternSpec) -> Result<HeadTensors<T>, SynthError> {
    let n = spec.shape.n();
    let d = spec.d;
    let mut rng = SplitMix64::new(spec.seed);

    let (q, k) = match spec.kind {
        HeadKind::Isotropic => {
            let s = ISOTROPIC_LOGIT_VAR.powf(0.25);
            let q = Mat::from_fn(n, d, |_, _| T::from_f64_lossy(rng.next_normal() * s));
            let k = Mat::from_fn(n, d, |_, _| T::from_f64_lossy(rng.next_normal() * s));
            (q, k)
        }
        _ => structured_qk(spec, &mut rng)?,
    };

    let v = Mat::from_fn(n, d, |_, _| T::from_f64_lossy(rng.next_normal()));
    Ok(HeadTensors::new(q, k, v)?)
}

fn structured_qk<T: Scalar>(
    spec: &HeadPatternSpec,
    rng: &mut SplitMix64,
) -> Result<(Mat<T>, Mat<T>), SynthError> {
    let n = spec.shape.n();
    let d = spec.d;
    let (d_sig, dn) = nuisance_split(d);
    let (ids, n_groups) = group_ids(spec.kind, &spec.shape);
    let dirs: Vec<Vec<f64>> = (0..n_groups).map(|_| unit_vec(rng, d_sig)).collect();
    let sink_dir = unit_vec(rng, d_sig);
    let sinks = rng.sample_distinct(n, SINK_COUNT.min(n));
    let amp = plant_amplitude(spec.strength, d);
    let amp_local = plant_amplitude(0.75 * spec.strength, d);
    let is_mix = spec.kind == HeadKind::GlobalMixture;

    let build = |is_k: bool, rng: &mut SplitMix64| -> Mat<T> {
        let mut data = Vec::with_capacity(n * d);
        for tok in 0..n {
            let dir = &dirs[ids[tok]];
            let sink_key = is_k && is_mix && sinks.binary_search(&tok).is_ok();
            for c in 0..d_sig {
                let base = if sink_key {
                    amp * SINK_NORM_BOOST * sink_dir[c]
                } else if is_mix {
                    let sink_part = if is_k { 0.0 } else { amp / SINK_NORM_BOOST * sink_dir[c] };
                    amp_local * dir[c] + sink_part
                } else {
                    amp * dir[c]
                };
                data.push(T::from_f64_lossy(base + spec.noise * rng.next_normal()));
            }
            // Inactive channels: junk on this side, zeros on the other, so
            // the dot product never sees them.
            for side in 0..2 {
                let active = (side == 0) != is_k;
                for _ in 0..dn {
                    let draw = rng.next_normal();
                    data.push(if active { T::from_f64_lossy(amp * draw) } else { T::zero() });
                }
            }
        }
        Mat::from_vec(n, d, data)
    };
    let q = build(false, rng);
    let k = build(true, rng);
    Ok((q, k))
}

/// Concatenates `count` seeded heads per spec into a calibration set with
/// recorded provenance. All specs must share shape and head dim.
pub fn generate_calibration<T: Scalar>(
    specs: &[HeadPatternSpec],
    count: usize,
) -> Result<CalibrationSet<T>, SynthError> {
    assert!(!specs.is_empty() && count > 0);
    let shape = specs[0].shape;
    let mut samples = Vec::with_capacity(specs.len() * count);
    for spec in specs {
        for c in 0..count {
            let seed = derive_seed(spec.seed, c as u64);
            let one = HeadPatternSpec { seed, ..*spec };
            samples.push(CalibrationSample {
                tensors: generate_head::<T>(&one)?,
                provenance: format!("{}:seed={}", spec.kind, seed),
            });
        }
    }
    Ok(CalibrationSet::new(shape, samples)?)
}

/// The standard four-head suite: one head of each kind over a shared shape,
/// at the noise level the distillation ablations run with.
pub fn standard_suite(shape: LatentShape, d: usize, seed: u64) -> Vec<HeadPatternSpec> {
    [HeadKind::LocalSpatial, HeadKind::TemporalStride, HeadKind::GlobalMixture, HeadKind::Isotropic]
        .iter()
        .enumerate()
        .map(|(i, &kind)| {
            HeadPatternSpec::new(kind, shape, d, derive_seed(seed, i as u64)).with_noise(1.0)
        })
        .collect()
}

/// Structured kinds only, cycled; used by mask-quality experiments where an
/// unstructured head would have nothing to recover.
pub fn structured_kinds() -> [HeadKind; 3] {
    [HeadKind::LocalSpatial, HeadKind::TemporalStride, HeadKind::GlobalMixture]
}

/// Tile configuration of size `b` matched to a head kind's planted geometry:
/// temporal heads get the deepest feasible temporal extent, the others stay
/// close to the local block. Falls back to canonical order on ties.
pub fn suite_config(
    kind: HeadKind,
    shape: &LatentShape,
    b: usize,
) -> Result<TileConfig, SynthError> {
    let configs = enumerate_configs(b, Some(shape))?;
    let pick = match kind {
        HeadKind::TemporalStride => configs
            .iter()
            .max_by_key(|c| (c.pt, std::cmp::Reverse(c.ph.abs_diff(c.pw))))
            .copied(),
        _ => configs
            .iter()
            .min_by_key(|c| (c.ph.abs_diff(LOCAL_BLOCK) + c.pw.abs_diff(LOCAL_BLOCK), c.pt))
            .copied(),
    };
    Ok(pick.expect("search space is non-empty"))
}
