//! Experiment configuration, loaded from JSON or defaulted to desk scale.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use tilesparse::estimator::PoolMode;
use tilesparse::synth::HeadPatternSpec;
use tilesparse::tiling::LatentShape;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("exactly one of `k` and `sparsity` must be given")]
    BudgetAmbiguous,
    #[error("sparsity must be in [0, 1), got {0}")]
    SparsityOutOfRange(f64),
    #[error("k must be >= 1")]
    KOutOfRange,
    #[error("tile size {b} does not divide token count {n}")]
    TileSizeMismatch { b: usize, n: usize },
    #[error("train.steps and train.hidden_mult must be >= 1")]
    TrainShape,
    #[error("train.fraction must be in (0, 1], got {0}")]
    FractionOutOfRange(f64),
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(#[from] serde_json::Error),
}

fn default_shape() -> LatentShape {
    LatentShape::new(8, 16, 16).expect("static shape")
}

fn default_d() -> usize {
    32
}

fn default_tile_size() -> usize {
    64
}

fn default_sparsity_levels() -> Vec<f64> {
    vec![0.875, 0.9, 0.95]
}

fn default_pool_modes() -> Vec<PoolMode> {
    vec![PoolMode::Triplet, PoolMode::Avg, PoolMode::MaxMin]
}

fn default_cal_samples() -> usize {
    2
}

fn default_lambda() -> f64 {
    1.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    #[serde(default = "TrainSettings::default_steps")]
    pub steps: usize,
    #[serde(default = "TrainSettings::default_lr")]
    pub lr: f64,
    /// Fraction of query tiles supervised per step; null supervises all.
    #[serde(default = "TrainSettings::default_fraction")]
    pub fraction: Option<f64>,
    #[serde(default)]
    pub d_latent: Option<usize>,
    #[serde(default = "TrainSettings::default_hidden_mult")]
    pub hidden_mult: usize,
}

impl TrainSettings {
    fn default_steps() -> usize {
        300
    }

    fn default_lr() -> f64 {
        6e-4
    }

    fn default_fraction() -> Option<f64> {
        Some(0.25)
    }

    fn default_hidden_mult() -> usize {
        2
    }
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            steps: Self::default_steps(),
            lr: Self::default_lr(),
            fraction: Self::default_fraction(),
            d_latent: None,
            hidden_mult: Self::default_hidden_mult(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Informational experiment kind; the subcommand decides what runs.
    #[serde(default)]
    pub experiment: Option<String>,
    #[serde(default = "default_shape")]
    pub shape: LatentShape,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_tile_size")]
    pub tile_size: usize,
    /// Exactly one of `k` and `sparsity`.
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub sparsity: Option<f64>,
    /// Sweep points for experiments that scan sparsity.
    #[serde(default = "default_sparsity_levels")]
    pub sparsity_levels: Vec<f64>,
    /// Explicit head suite; the standard four-kind suite when absent.
    #[serde(default)]
    pub heads: Option<Vec<HeadPatternSpec>>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default = "default_pool_modes")]
    pub pool_modes: Vec<PoolMode>,
    /// Calibration samples per head for the tiling search.
    #[serde(default = "default_cal_samples")]
    pub cal_samples: usize,
    /// Dispersion weight for the statistics-only score diagnostic.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Load head tensors from a `gen` output directory instead of sampling.
    #[serde(default)]
    pub input_dir: Option<PathBuf>,
    /// Estimator checkpoint for mask evaluation.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: None,
            shape: default_shape(),
            d: default_d(),
            tile_size: default_tile_size(),
            k: None,
            sparsity: Some(0.9),
            sparsity_levels: default_sparsity_levels(),
            heads: None,
            seed: 0,
            train: TrainSettings::default(),
            pool_modes: default_pool_modes(),
            cal_samples: default_cal_samples(),
            lambda: default_lambda(),
            input_dir: None,
            checkpoint: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        match (self.k, self.sparsity) {
            (Some(_), Some(_)) | (None, None) => return Err(ConfigError::BudgetAmbiguous),
            (Some(0), None) => return Err(ConfigError::KOutOfRange),
            (None, Some(s)) if !(0.0..1.0).contains(&s) => {
                return Err(ConfigError::SparsityOutOfRange(s))
            }
            _ => {}
        }
        if !self.shape.n().is_multiple_of(self.tile_size) {
            return Err(ConfigError::TileSizeMismatch { b: self.tile_size, n: self.shape.n() });
        }
        if self.train.steps == 0 || self.train.hidden_mult == 0 {
            return Err(ConfigError::TrainShape);
        }
        if let Some(f) = self.train.fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(ConfigError::FractionOutOfRange(f));
            }
        }
        Ok(())
    }

    pub fn n_tiles(&self) -> usize {
        self.shape.n() / self.tile_size
    }

    /// Budget for a tile count: `k` verbatim, or sparsity mapped through
    /// round-half-up and clamped into `[1, n_tiles]`.
    pub fn k_for(&self, n_tiles: usize) -> usize {
        match (self.k, self.sparsity) {
            (Some(k), _) => k.min(n_tiles),
            (None, Some(s)) => k_for_sparsity(s, n_tiles),
            (None, None) => unreachable!("validated"),
        }
    }
}

/// `k = round((1 - s) * n_tiles)`, half up, clamped to at least one tile.
/// A one-billionth nudge keeps decimal half points (for example sparsity
/// 0.9 of 25 tiles) rounding up despite binary representation.
pub fn k_for_sparsity(sparsity: f64, n_tiles: usize) -> usize {
    let raw = (1.0 - sparsity) * n_tiles as f64;
    (((raw + 0.5 + 1e-9).floor()) as usize).clamp(1, n_tiles)
}
