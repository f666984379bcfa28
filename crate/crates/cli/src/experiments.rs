//! End-to-end experiment drivers tying generation, oracle construction,
//! estimator training, tiling search, and diagnostics into report rows.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use tilesparse::attention::{
    count_flops, full_attention, sparse_attention, tile_head, AttentionError, FlopsReport,
    HeadTensors, TileMask,
};
use tilesparse::estimator::{
    infer_pool_mode, load_checkpoint, save_checkpoint, train, write_loss_history_csv,
    EstimatorError, EstimatorParams, PoolMode, TrainConfig, TrainSample,
};
use tilesparse::mat::Mat;
use tilesparse::metrics::{
    approx_stat_score, bhatia_davis, dot_decomposition, mask_confusion, output_error,
    renormalization_check, residual_bound, spearman, tile_recall, MetricsError, VectorStats,
};
use tilesparse::oracle::{max_pool_probs, topk_mask, OracleError, TileScores};
use tilesparse::rng::{derive_seed, SplitMix64};
use tilesparse::search::{
    search_tiling, CalibrationSample, CalibrationSet, SearchError, SearchResult,
};
use tilesparse::synth::{
    generate_calibration, generate_head, standard_suite, suite_config, HeadPatternSpec, SynthError,
};
use tilesparse::tiling::{build_layout, untile, LatentShape, TileConfig, TileLayout, TilingError};

use crate::config::{k_for_sparsity, ConfigError, ExperimentConfig};
use crate::report::{ReportError, ReportRow};
use crate::tensor_file::{read_tensor, write_tensor, TensorData, TensorFileError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("checkpoint has {ckpt} heads, suite has {suite}")]
    CheckpointHeadCount { ckpt: usize, suite: usize },
    #[error("checkpoint descriptor width {d_in} does not match any pool mode at d={d}")]
    CheckpointWidth { d_in: usize, d: usize },
    #[error("subcommand requires a checkpoint path in the config")]
    CheckpointRequired,
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorFileError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Tiling(#[from] TilingError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// One head of the experiment suite with its generation recipe.
pub struct SuiteHead {
    pub id: String,
    pub spec: HeadPatternSpec,
    pub tensors: HeadTensors<f32>,
}

#[derive(Serialize, Deserialize)]
struct ManifestHead {
    id: String,
    spec: HeadPatternSpec,
    q: String,
    k: String,
    v: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    shape: LatentShape,
    d: usize,
    heads: Vec<ManifestHead>,
}

fn suite_specs(cfg: &ExperimentConfig) -> Vec<HeadPatternSpec> {
    cfg.heads.clone().unwrap_or_else(|| standard_suite(cfg.shape, cfg.d, cfg.seed))
}

/// Builds the head suite: from a `gen` directory when `input_dir` is set,
/// otherwise sampled from the configured specs.
pub fn build_suite(cfg: &ExperimentConfig) -> Result<Vec<SuiteHead>, HarnessError> {
    if let Some(dir) = &cfg.input_dir {
        return load_suite(dir);
    }
    suite_specs(cfg)
        .into_iter()
        .enumerate()
        .map(|(i, spec)| {
            Ok(SuiteHead {
                id: format!("h{i}:{}", spec.kind),
                tensors: generate_head(&spec)?,
                spec,
            })
        })
        .collect()
}

fn load_suite(dir: &Path) -> Result<Vec<SuiteHead>, HarnessError> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
    let mut heads = Vec::with_capacity(manifest.heads.len());
    for entry in manifest.heads {
        let load = |name: &str| -> Result<Mat<f32>, HarnessError> {
            let t = read_tensor(dir.join(name))?;
            if t.dims != [manifest.shape.n(), manifest.d] {
                return Err(HarnessError::Manifest {
                    path: manifest_path.clone(),
                    message: format!("{name}: dims {:?} do not match manifest", t.dims),
                });
            }
            Ok(Mat::from_vec(t.dims[0], t.dims[1], t.data))
        };
        let tensors = HeadTensors::new(load(&entry.q)?, load(&entry.k)?, load(&entry.v)?)?;
        heads.push(SuiteHead { id: entry.id, spec: entry.spec, tensors });
    }
    Ok(heads)
}

/// Samples the suite and writes per-head q/k/v tensors plus a manifest.
pub fn run_gen(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    std::fs::create_dir_all(out_dir)?;
    let heads = build_suite(cfg)?;
    let mut written = Vec::new();
    let mut manifest = Manifest { shape: cfg.shape, d: cfg.d, heads: Vec::new() };
    for (i, head) in heads.iter().enumerate() {
        let names = [format!("h{i}_q.vten"), format!("h{i}_k.vten"), format!("h{i}_v.vten")];
        for (name, mat) in
            names.iter().zip([head.tensors.q(), head.tensors.k(), head.tensors.v()])
        {
            let path = out_dir.join(name);
            write_tensor(&path, &TensorData::from_mat(mat))?;
            written.push(path);
        }
        manifest.heads.push(ManifestHead {
            id: head.id.clone(),
            spec: head.spec,
            q: names[0].clone(),
            k: names[1].clone(),
            v: names[2].clone(),
        });
    }
    let manifest_path = out_dir.join("manifest.json");
    write_atomic(&manifest_path, &serde_json::to_string_pretty(&manifest)?)?;
    written.push(manifest_path);
    Ok(written)
}

fn write_atomic(path: &Path, text: &str) -> Result<(), HarnessError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn load_params_for_suite(
    cfg: &ExperimentConfig,
    suite_len: usize,
) -> Result<Option<(EstimatorParams<f32>, PoolMode)>, HarnessError> {
    let Some(path) = &cfg.checkpoint else { return Ok(None) };
    let mut params = load_checkpoint(path)?;
    if params.n_heads() != suite_len {
        return Err(HarnessError::CheckpointHeadCount { ckpt: params.n_heads(), suite: suite_len });
    }
    let mode = infer_pool_mode(params.d_in, cfg.d)
        .ok_or(HarnessError::CheckpointWidth { d_in: params.d_in, d: cfg.d })?;
    params.pool_mode = mode;
    Ok(Some((params, mode)))
}

/// Per-row confusion table entry; see [`write_confusion_csv`].
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionRow {
    pub head_id: String,
    pub family: String,
    pub sparsity: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub frob_err: f64,
}

/// Confusion/recall table with the fixed column order
/// `head_id,family,sparsity,recall,tp,fp,fn,frob_err`. Atomic write.
pub fn write_confusion_csv(
    path: impl AsRef<Path>,
    rows: &[ConfusionRow],
) -> Result<(), HarnessError> {
    let path = path.as_ref();
    let mut text = String::from("head_id,family,sparsity,recall,tp,fp,fn,frob_err\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.head_id, r.family, r.sparsity, r.recall, r.tp, r.fp, r.fn_, r.frob_err
        ));
    }
    write_atomic(path, &text)
}

pub struct OracleOutcome {
    pub rows: Vec<ReportRow>,
    pub confusion: Vec<ConfusionRow>,
}

/// Evaluates oracle, estimator (when a checkpoint is supplied), and random
/// masks per head and sparsity level. One report row and one confusion row
/// per (head, level, family).
pub fn run_oracle_experiment(cfg: &ExperimentConfig) -> Result<Vec<ReportRow>, HarnessError> {
    Ok(run_oracle_experiment_full(cfg)?.rows)
}

pub fn run_oracle_experiment_full(cfg: &ExperimentConfig) -> Result<OracleOutcome, HarnessError> {
    let heads = build_suite(cfg)?;
    let params = load_params_for_suite(cfg, heads.len())?;
    let levels: Vec<f64> = match cfg.k {
        Some(k) => vec![1.0 - k as f64 / cfg.n_tiles() as f64],
        None => cfg.sparsity_levels.clone(),
    };
    let mut rows = Vec::new();
    let mut confusion = Vec::new();
    for (hi, head) in heads.iter().enumerate() {
        let started = Instant::now();
        let layout = head_layout(cfg, head)?;
        let n_tiles = layout.n_tiles();
        let full = full_attention(&head.tensors, true);
        let probs = full.probs.as_ref().expect("probs requested");
        let scores = TileScores::new(max_pool_probs(probs, &layout))?;
        let tiled = tile_head(&head.tensors, &layout)?;
        for (li, &level) in levels.iter().enumerate() {
            let k = k_for_sparsity(level, n_tiles);
            let oracle = topk_mask(&scores, k)?;
            let mut families: Vec<(&str, TileMask)> = vec![("oracle", oracle.clone())];
            if let Some((params, _)) = &params {
                families.push((
                    "estimator",
                    params.predict_mask(hi, &head.tensors, &layout, k)?,
                ));
            }
            families.push((
                "random",
                TileMask::random(n_tiles, k, derive_seed(cfg.seed, (hi * 1000 + li) as u64))?,
            ));
            for (family, mask) in families {
                let sp = untile(&sparse_attention(&tiled, &mask)?, &layout)?;
                let sparsity = 1.0 - k as f64 / n_tiles as f64;
                let recall = tile_recall(&mask, &oracle)?;
                let frob_err = output_error(&full.out, &sp);
                let c = mask_confusion(&mask, &oracle)?;
                confusion.push(ConfusionRow {
                    head_id: head.id.clone(),
                    family: family.into(),
                    sparsity,
                    recall,
                    tp: c.tp,
                    fp: c.fp,
                    fn_: c.fn_,
                    frob_err,
                });
                rows.push(ReportRow {
                    experiment: "oracle".into(),
                    head_id: head.id.clone(),
                    family: family.into(),
                    config: layout.config().to_string(),
                    sparsity,
                    recall,
                    frob_err,
                    flops_ratio: count_flops(head.tensors.n(), cfg.d, n_tiles, k).ratio(),
                    loss: None,
                    wall_seconds: started.elapsed().as_secs_f64(),
                });
            }
        }
    }
    Ok(OracleOutcome { rows, confusion })
}

fn head_layout(cfg: &ExperimentConfig, head: &SuiteHead) -> Result<TileLayout, HarnessError> {
    let config = suite_config(head.spec.kind, &cfg.shape, cfg.tile_size)?;
    Ok(build_layout(&cfg.shape, &config)?)
}

pub struct DistillOutcome {
    pub rows: Vec<ReportRow>,
    pub artifacts: Vec<PathBuf>,
}

/// Trains the estimator once per requested pool mode, writes loss curves and
/// checkpoints, and reports per-head recall against the oracle mask at the
/// configured budget.
pub fn run_distill_experiment(
    cfg: &ExperimentConfig,
    out_dir: Option<&Path>,
) -> Result<DistillOutcome, HarnessError> {
    let heads = build_suite(cfg)?;
    let samples: Vec<TrainSample<f32>> = heads
        .iter()
        .map(|h| {
            Ok(TrainSample { tensors: h.tensors.clone(), layout: head_layout(cfg, h)? })
        })
        .collect::<Result<_, HarnessError>>()?;
    let n_tiles = samples[0].layout.n_tiles();
    let k = cfg.k_for(n_tiles);

    // Oracle masks are mode-independent; build them once.
    let oracles: Vec<(TileMask, Mat<f32>)> = heads
        .iter()
        .zip(&samples)
        .map(|(h, s)| {
            let full = full_attention(&h.tensors, true);
            let probs = full.probs.as_ref().expect("probs requested");
            let scores = TileScores::new(max_pool_probs(probs, &s.layout))?;
            Ok((topk_mask(&scores, k)?, full.out))
        })
        .collect::<Result<_, HarnessError>>()?;

    let mut rows = Vec::new();
    let mut artifacts = Vec::new();
    for &mode in &cfg.pool_modes {
        let started = Instant::now();
        let train_cfg = TrainConfig {
            pool_mode: mode,
            steps: cfg.train.steps,
            lr: cfg.train.lr,
            d_latent: cfg.train.d_latent,
            hidden_mult: cfg.train.hidden_mult,
            row_fraction: cfg.train.fraction,
            seed: cfg.seed,
            ..TrainConfig::default()
        };
        let outcome = train(&samples, &train_cfg)?;
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)?;
            let loss_path = dir.join(format!("loss_{mode}.csv"));
            write_loss_history_csv(&loss_path, outcome.history())?;
            let ckpt_path = dir.join(format!("checkpoint_{mode}.bin"));
            save_checkpoint(&ckpt_path, &outcome.params)?;
            artifacts.push(loss_path);
            artifacts.push(ckpt_path);
        }
        for (hi, (head, sample)) in heads.iter().zip(&samples).enumerate() {
            let (oracle, full_out) = &oracles[hi];
            let mask = outcome.params.predict_mask(hi, &head.tensors, &sample.layout, k)?;
            let tiled = tile_head(&head.tensors, &sample.layout)?;
            let sp = untile(&sparse_attention(&tiled, &mask)?, &sample.layout)?;
            rows.push(ReportRow {
                experiment: "distill".into(),
                head_id: head.id.clone(),
                family: mode.to_string(),
                config: sample.layout.config().to_string(),
                sparsity: 1.0 - k as f64 / n_tiles as f64,
                recall: tile_recall(&mask, oracle)?,
                frob_err: output_error(full_out, &sp),
                flops_ratio: count_flops(head.tensors.n(), cfg.d, n_tiles, k).ratio(),
                loss: Some(outcome.final_loss()),
                wall_seconds: started.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(DistillOutcome { rows, artifacts })
}

/// JSON shape of one head's search outcome.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SearchReportEntry {
    pub head_id: String,
    pub best: TileConfig,
    pub errors: Vec<SearchErrorEntry>,
    pub ties: Vec<TileConfig>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SearchErrorEntry {
    pub config: TileConfig,
    pub value: f64,
}

impl SearchReportEntry {
    fn from_result(head_id: String, result: SearchResult) -> Self {
        Self {
            head_id,
            best: result.best,
            errors: result
                .error_table
                .into_iter()
                .map(|(config, value)| SearchErrorEntry { config, value })
                .collect(),
            ties: result.ties,
        }
    }
}

/// Per-head tiling search over factorizations of the tile size.
pub fn run_search_experiment(
    cfg: &ExperimentConfig,
) -> Result<(Vec<ReportRow>, Vec<SearchReportEntry>), HarnessError> {
    let n_tiles = cfg.n_tiles();
    let k = cfg.k_for(n_tiles);
    let mut rows = Vec::new();
    let mut entries = Vec::new();
    if let Some(dir) = &cfg.input_dir {
        // Loaded heads contribute one calibration sample each.
        for head in load_suite(dir)? {
            let started = Instant::now();
            let cal = CalibrationSet::new(
                cfg.shape,
                vec![CalibrationSample { tensors: head.tensors, provenance: head.id.clone() }],
            )?;
            let result = search_tiling(&cal, cfg.tile_size, k)?;
            push_search_row(&mut rows, &mut entries, head.id, result, cfg, n_tiles, k, started);
        }
    } else {
        for (i, spec) in suite_specs(cfg).into_iter().enumerate() {
            let started = Instant::now();
            let cal = generate_calibration::<f32>(&[spec], cfg.cal_samples)?;
            let result = search_tiling(&cal, cfg.tile_size, k)?;
            let head_id = format!("h{i}:{}", spec.kind);
            push_search_row(&mut rows, &mut entries, head_id, result, cfg, n_tiles, k, started);
        }
    }
    Ok((rows, entries))
}

#[allow(clippy::too_many_arguments)]
fn push_search_row(
    rows: &mut Vec<ReportRow>,
    entries: &mut Vec<SearchReportEntry>,
    head_id: String,
    result: SearchResult,
    _cfg: &ExperimentConfig,
    n_tiles: usize,
    k: usize,
    started: Instant,
) {
    let best_err =
        result.error_table.iter().find(|(c, _)| *c == result.best).map(|(_, e)| *e).unwrap_or(0.0);
    rows.push(ReportRow {
        experiment: "search".into(),
        head_id: head_id.clone(),
        family: "oracle".into(),
        config: result.best.to_string(),
        sparsity: 1.0 - k as f64 / n_tiles as f64,
        recall: 1.0,
        frob_err: best_err.sqrt(),
        flops_ratio: k as f64 / n_tiles as f64,
        loss: None,
        wall_seconds: started.elapsed().as_secs_f64(),
    });
    entries.push(SearchReportEntry::from_result(head_id, result));
}

/// One diagnostics check: randomized cases against a hard bound.
#[derive(Clone, Debug, Serialize)]
pub struct DiagCheck {
    pub name: &'static str,
    pub cases: usize,
    pub violations: usize,
    /// Worst observed margin; negative means a violation of that size.
    pub worst_margin: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct DiagReport {
    /// Seed the sweeps were drawn from, recorded for reproducibility.
    pub seed: u64,
    pub checks: Vec<DiagCheck>,
    pub stat_score_spearman: f64,
    pub spearman_threshold: f64,
}

impl DiagReport {
    pub fn violations(&self) -> usize {
        let base: usize = self.checks.iter().map(|c| c.violations).sum();
        base + usize::from(self.stat_score_spearman < self.spearman_threshold)
    }
}

/// Randomized sweeps of the dispersion and renormalization identities, plus
/// the statistics-only score correlation. Vectors for the correlation sweep
/// carry a per-vector random mean so the mean product term has signal to
/// rank by.
pub fn run_diag(cfg: &ExperimentConfig, cases: usize) -> Result<DiagReport, HarnessError> {
    let mut rng = SplitMix64::new(derive_seed(cfg.seed, 0xD1A6));
    let mut checks = Vec::new();

    // Renormalization of masked softmax mass.
    let mut violations = 0usize;
    let mut worst = f64::INFINITY;
    for _ in 0..cases {
        let n = 2 + rng.next_below(62) as usize;
        let logits: Vec<f32> = (0..n).map(|_| (rng.next_normal() * 3.0) as f32).collect();
        let m = 1 + rng.next_below(n as u64) as usize;
        let retained = SplitMix64::new(rng.next_u64()).sample_distinct(n, m);
        let tau = 0.5 + 1.5 * rng.next_f64();
        let report = renormalization_check(&logits, &retained, tau)?;
        let margin = 1e-6 - report.max_deviation;
        worst = worst.min(margin);
        violations += usize::from(margin < 0.0);
    }
    checks.push(DiagCheck { name: "renormalization", cases, violations, worst_margin: worst });

    // Dot product decomposition identity.
    let mut violations = 0usize;
    let mut worst = f64::INFINITY;
    for _ in 0..cases {
        let d = 2 + rng.next_below(126) as usize;
        let q: Vec<f32> = (0..d).map(|_| rng.next_normal() as f32).collect();
        let k: Vec<f32> = (0..d).map(|_| rng.next_normal() as f32).collect();
        let (mean_term, cov_term) = dot_decomposition(&q, &k)?;
        let dot: f64 = q.iter().zip(&k).map(|(&a, &b)| a as f64 * b as f64).sum();
        let nq: f64 = q.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let nk: f64 = k.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let margin = 1e-6 * nq * nk - (mean_term + cov_term - dot).abs();
        worst = worst.min(margin);
        violations += usize::from(margin < 0.0);
    }
    checks.push(DiagCheck { name: "dot_decomposition", cases, violations, worst_margin: worst });

    // Variance bound from extrema.
    let mut violations = 0usize;
    let mut worst = f64::INFINITY;
    for _ in 0..cases {
        let n = 2 + rng.next_below(62) as usize;
        let v: Vec<f32> = (0..n).map(|_| (rng.next_normal() * 2.0) as f32).collect();
        let (_, _, slack) = bhatia_davis(&v);
        let margin = slack + 1e-9;
        worst = worst.min(margin);
        violations += usize::from(margin < 0.0);
    }
    checks.push(DiagCheck { name: "bhatia_davis", cases, violations, worst_margin: worst });

    // Residual interaction bound.
    let mut violations = 0usize;
    let mut worst = f64::INFINITY;
    for _ in 0..cases {
        let b = 2 + rng.next_below(14) as usize;
        let d = 1 + rng.next_below(31) as usize;
        let tq = Mat::from_fn(b, d, |_, _| rng.next_normal() as f32);
        let tk = Mat::from_fn(b, d, |_, _| rng.next_normal() as f32);
        let (e, bound) = residual_bound(&tq, &tk)?;
        let margin = bound + 1e-9 - e;
        worst = worst.min(margin);
        violations += usize::from(margin < 0.0);
    }
    checks.push(DiagCheck { name: "residual_bound", cases, violations, worst_margin: worst });

    // Statistics-only score vs the true dot product, rank correlation.
    let d = 64;
    let mut scores = Vec::with_capacity(cases);
    let mut dots = Vec::with_capacity(cases);
    for _ in 0..cases {
        let draw = |rng: &mut SplitMix64| -> Vec<f32> {
            let mean = rng.next_normal();
            (0..d).map(|_| (mean + rng.next_normal()) as f32).collect()
        };
        let q = draw(&mut rng);
        let k = draw(&mut rng);
        let sq = VectorStats::from_slice(&q);
        let sk = VectorStats::from_slice(&k);
        scores.push(approx_stat_score(&sq, &sk, d, cfg.lambda));
        dots.push(q.iter().zip(&k).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>());
    }
    let rho = spearman(&scores, &dots);

    Ok(DiagReport { seed: cfg.seed, checks, stat_score_spearman: rho, spearman_threshold: 0.3 })
}

/// FLOPs accounting across the configured sparsity sweep.
pub fn bench_flops_table(cfg: &ExperimentConfig) -> Vec<(f64, usize, FlopsReport)> {
    let n_tiles = cfg.n_tiles();
    cfg.sparsity_levels
        .iter()
        .map(|&s| {
            let k = k_for_sparsity(s, n_tiles);
            (s, k, count_flops(cfg.shape.n(), cfg.d, n_tiles, k))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            shape: LatentShape::new(2, 4, 4).unwrap(),
            d: 16,
            tile_size: 8,
            ..ExperimentConfig::default()
        };
        cfg.train.steps = 30;
        cfg.validate().unwrap();
        cfg
    }

    #[test]
    fn oracle_rows_counted_and_zero_sparsity_is_exact() {
        let mut cfg = small_cfg();
        cfg.sparsity_levels = vec![0.0, 0.75];
        let rows = run_oracle_experiment(&cfg).unwrap();
        // 4 heads x 2 levels x 2 families (no checkpoint).
        assert_eq!(rows.len(), 16);
        for row in rows.iter().filter(|r| r.sparsity == 0.0) {
            assert_eq!(row.recall, 1.0);
            assert!(row.frob_err < 1e-6, "full budget must reproduce full attention");
            assert_eq!(row.flops_ratio, 1.0);
        }
    }

    #[test]
    fn oracle_beats_random_per_row_on_structured_heads() {
        let mut cfg = small_cfg();
        cfg.sparsity_levels = vec![0.75];
        cfg.heads = Some(
            tilesparse::synth::structured_kinds()
                .iter()
                .enumerate()
                .map(|(i, &kind)| {
                    HeadPatternSpec::new(kind, cfg.shape, cfg.d, 100 + i as u64)
                        .with_strength(10.0)
                })
                .collect(),
        );
        let rows = run_oracle_experiment(&cfg).unwrap();
        let err = |family: &str, head: &str| {
            rows.iter()
                .find(|r| r.family == family && r.head_id == head)
                .map(|r| r.frob_err)
                .unwrap()
        };
        let heads: Vec<String> = rows
            .iter()
            .map(|r| r.head_id.clone())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        for head in &heads {
            assert!(
                err("oracle", head) <= err("random", head),
                "oracle lost to random on {head}"
            );
        }
    }

    #[test]
    fn confusion_table_consistent_with_report() {
        let mut cfg = small_cfg();
        cfg.sparsity_levels = vec![0.5];
        let outcome = run_oracle_experiment_full(&cfg).unwrap();
        assert_eq!(outcome.confusion.len(), outcome.rows.len());
        let n_tiles = cfg.n_tiles();
        for (c, r) in outcome.confusion.iter().zip(&outcome.rows) {
            assert_eq!(c.head_id, r.head_id);
            assert_eq!(c.frob_err, r.frob_err);
            // Equal budgets on both sides of the confusion counts.
            assert_eq!(c.fp, c.fn_);
            // Recall equals total tp over the total budget.
            let k = (c.tp + c.fp) / n_tiles;
            assert!((c.recall - c.tp as f64 / (k * n_tiles) as f64).abs() < 1e-12);
        }
        let path = std::env::temp_dir().join(format!("conf-{}.csv", std::process::id()));
        write_confusion_csv(&path, &outcome.confusion).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::remove_file(&path).ok();
        assert!(text.starts_with("head_id,family,sparsity,recall,tp,fp,fn,frob_err\n"));
        assert_eq!(text.lines().count(), outcome.confusion.len() + 1);
    }

    #[test]
    fn distill_rows_and_artifacts() {
        let mut cfg = small_cfg();
        cfg.pool_modes = vec![PoolMode::Triplet];
        let dir = std::env::temp_dir().join(format!("distill-{}", std::process::id()));
        let outcome = run_distill_experiment(&cfg, Some(&dir)).unwrap();
        assert_eq!(outcome.rows.len(), 4);
        assert!(dir.join("loss_triplet.csv").exists());
        assert!(dir.join("checkpoint_triplet.bin").exists());
        let loss_lines =
            std::fs::read_to_string(dir.join("loss_triplet.csv")).unwrap().lines().count();
        assert_eq!(loss_lines, cfg.train.steps + 1, "header plus one row per step");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn search_separates_anisotropic_heads() {
        let shape = LatentShape::new(8, 8, 8).unwrap();
        let mut cfg = ExperimentConfig {
            shape,
            d: 16,
            tile_size: 64,
            ..ExperimentConfig::default()
        };
        cfg.heads = Some(vec![
            tilesparse::synth::HeadPatternSpec::new(
                tilesparse::synth::HeadKind::TemporalStride,
                shape,
                16,
                21,
            )
            .with_strength(10.0)
            .with_noise(0.1),
            tilesparse::synth::HeadPatternSpec::new(
                tilesparse::synth::HeadKind::LocalSpatial,
                shape,
                16,
                22,
            )
            .with_strength(10.0)
            .with_noise(0.1),
        ]);
        cfg.validate().unwrap();
        let (_, entries) = run_search_experiment(&cfg).unwrap();
        assert_eq!(entries.len(), 2);
        let temporal = &entries[0];
        let local = &entries[1];
        assert_ne!(temporal.best, local.best, "head kinds must pick different tilings");
        assert!(temporal.best.pt > local.best.pt);
    }

    #[test]
    fn search_entries_roundtrip_json() {
        let mut cfg = small_cfg();
        cfg.cal_samples = 1;
        let (rows, entries) = run_search_experiment(&cfg).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(entries.len(), 4);
        let json = serde_json::to_string_pretty(&entries).unwrap();
        let back: Vec<SearchReportEntry> = serde_json::from_str(&json).unwrap();
        assert_eq!(back.len(), entries.len());
        for (a, b) in back.iter().zip(&entries) {
            assert_eq!(a.best, b.best);
            assert_eq!(a.errors.len(), b.errors.len());
        }
    }

    #[test]
    fn diag_sweeps_clean() {
        let report = run_diag(&ExperimentConfig::default(), 1000).unwrap();
        assert_eq!(report.violations(), 0, "diag report: {report:?}");
        assert!(report.stat_score_spearman > 0.3);
    }

    #[test]
    fn diag_violations_accounting() {
        let mut report = run_diag(&ExperimentConfig::default(), 100).unwrap();
        report.checks[0].violations = 2;
        assert_eq!(report.violations(), 2);
        report.stat_score_spearman = 0.0;
        assert_eq!(report.violations(), 3, "a failed correlation counts as a violation");
    }

    #[test]
    fn gen_then_load_roundtrips() {
        let mut cfg = small_cfg();
        let dir = std::env::temp_dir().join(format!("gen-{}", std::process::id()));
        let files = run_gen(&cfg, &dir).unwrap();
        assert_eq!(files.len(), 13, "12 tensors plus manifest");
        cfg.input_dir = Some(dir.clone());
        let loaded = build_suite(&cfg).unwrap();
        let generated = build_suite(&ExperimentConfig { input_dir: None, ..cfg.clone() }).unwrap();
        for (a, b) in loaded.iter().zip(&generated) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.tensors, b.tensors, "file roundtrip must be bit-exact");
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn bench_table_ratios_exact() {
        let cfg = small_cfg();
        for (s, k, report) in bench_flops_table(&cfg) {
            assert_eq!(report.ratio(), k as f64 / cfg.n_tiles() as f64);
            assert!(s >= 0.0);
        }
    }
}
