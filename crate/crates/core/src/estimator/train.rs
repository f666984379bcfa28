//! Distillation training loop: analytic gradients of the row-wise KL loss
//! through the bilinear score map and both MLPs, with adaptive-moment
//! updates. Backbone features never receive gradients; the descriptors are
//! treated as constants throughout.

use rayon::prelude::*;

use super::{
    gelu_prime, kl_row, pool_descriptors, resolve_rows, EstimatorError, EstimatorParams,
    HeadParams, MlpCache, MlpParams, PoolMode,
};
use crate::attention::HeadTensors;
use crate::mat::Mat;
use crate::oracle::{
    row_normalize, sample_query_rows, target_scores_dense, target_scores_streaming,
    QueryRowSubset, TargetDistribution, DENSE_PROBS_LIMIT,
};
use crate::rng::{derive_seed, SplitMix64};
use crate::scalar::Scalar;
use crate::tiling::{tile, TileLayout};

/// One calibration head and the tiling it is supervised under.
#[derive(Clone, Debug)]
pub struct TrainSample<T> {
    pub tensors: HeadTensors<T>,
    pub layout: TileLayout,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub pool_mode: PoolMode,
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Estimator latent dimension; defaults to the head dim.
    pub d_latent: Option<usize>,
    /// Hidden width as a multiple of the descriptor width.
    pub hidden_mult: usize,
    /// Fraction of query tiles supervised per step; `None` supervises all.
    pub row_fraction: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pool_mode: PoolMode::Triplet,
            steps: 300,
            lr: 6e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            d_latent: None,
            hidden_mult: 2,
            row_fraction: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

/// Optimizer state: step count, first and second moment accumulators shaped
/// like the parameters, the learning rate, and the loss history.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub step: usize,
    pub first: Vec<HeadParams<T>>,
    pub second: Vec<HeadParams<T>>,
    pub lr: f64,
    pub loss_history: Vec<LossPoint>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub params: EstimatorParams<T>,
    pub state: TrainState<T>,
}

impl<T> TrainOutcome<T> {
    pub fn history(&self) -> &[LossPoint] {
        &self.state.loss_history
    }

    pub fn final_loss(&self) -> f64 {
        self.state.loss_history.last().expect("history non-empty after first step").loss
    }
}

/// Analytic gradients of the distillation loss with respect to every MLP
/// parameter of one head. Descriptors are constants: no gradient is
/// produced for them. Returns (loss, gradients).
pub fn loss_gradients<T: Scalar>(
    params: &HeadParams<T>,
    zq: &Mat<T>,
    zk: &Mat<T>,
    a_tgt: &TargetDistribution<T>,
    rows: Option<&QueryRowSubset>,
) -> Result<(f64, HeadParams<T>), EstimatorError> {
    if zq.cols() != params.phi_q.d_in() {
        return Err(EstimatorError::WidthMismatch { got: zq.cols(), expected: params.phi_q.d_in() });
    }
    if zk.cols() != params.phi_k.d_in() {
        return Err(EstimatorError::WidthMismatch { got: zk.cols(), expected: params.phi_k.d_in() });
    }
    let cq = params.phi_q.forward_cached(zq);
    let ck = params.phi_k.forward_cached(zk);
    let inv_sqrt = T::from_f64_lossy(1.0 / (params.phi_q.d_out() as f64).sqrt());
    let scores = cq.y.mul_nt(&ck.y).scale(inv_sqrt);
    if a_tgt.n_tiles() != scores.cols() {
        return Err(EstimatorError::ShapeMismatch {
            a_rows: a_tgt.rows(),
            a_cols: a_tgt.n_tiles(),
            s_rows: scores.rows(),
            s_cols: scores.cols(),
        });
    }
    let pairs = resolve_rows(a_tgt.rows(), scores.rows(), rows)?;
    let inv_count = T::from_f64_lossy(1.0 / pairs.len() as f64);

    // dL/dS on selected rows: (softmax(S) - A) / |rows|.
    let mut loss = 0.0f64;
    let mut g = Mat::zeros(scores.rows(), scores.cols());
    for &(ar, sr) in &pairs {
        loss += kl_row(a_tgt.mat().row(ar), scores.row(sr));
        let mut p = scores.row(sr).to_vec();
        crate::attention::softmax_in_place(&mut p);
        let grow = g.row_mut(sr);
        for ((gv, &pv), &av) in grow.iter_mut().zip(&p).zip(a_tgt.mat().row(ar)) {
            *gv = (pv - av) * inv_count;
        }
    }
    loss /= pairs.len() as f64;

    let dyq = g.mul(&ck.y).scale(inv_sqrt);
    let dyk = g.mul_tn(&cq.y).scale(inv_sqrt);
    let grads = HeadParams {
        phi_q: mlp_backward(&params.phi_q, zq, &cq, &dyq),
        phi_k: mlp_backward(&params.phi_k, zk, &ck, &dyk),
    };
    Ok((loss, grads))
}

fn mlp_backward<T: Scalar>(
    params: &MlpParams<T>,
    x: &Mat<T>,
    cache: &MlpCache<T>,
    dy: &Mat<T>,
) -> MlpParams<T> {
    let dw2 = cache.a1.mul_tn(dy);
    let db2 = column_sums(dy);
    let mut dz1 = dy.mul_nt(&params.w2);
    for i in 0..dz1.rows() {
        for (dv, &z) in dz1.row_mut(i).iter_mut().zip(cache.z1.row(i)) {
            *dv *= gelu_prime(z);
        }
    }
    let dw1 = x.mul_tn(&dz1);
    let db1 = column_sums(&dz1);
    MlpParams { w1: dw1, b1: db1, w2: dw2, b2: db2 }
}

fn column_sums<T: Scalar>(m: &Mat<T>) -> Vec<T> {
    let mut out = vec![T::zero(); m.cols()];
    for i in 0..m.rows() {
        for (acc, &v) in out.iter_mut().zip(m.row(i)) {
            *acc += v;
        }
    }
    out
}

/// Trains one projection pair per calibration head by distilling its
/// row-normalized max-pooled attention targets. Deterministic in the config
/// seed; the calibration tensors are read-only throughout.
pub fn train<T: Scalar>(
    samples: &[TrainSample<T>],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>, EstimatorError> {
    if samples.is_empty() {
        return Err(EstimatorError::EmptyCalibration);
    }
    let d = samples[0].tensors.d();
    for (i, s) in samples.iter().enumerate() {
        if s.tensors.d() != d {
            return Err(EstimatorError::DimMismatch { index: i, d: s.tensors.d(), expected: d });
        }
    }
    let d_in = cfg.pool_mode.descriptor_width(d);
    let d_hidden = cfg.hidden_mult * d_in;
    let d_latent = cfg.d_latent.unwrap_or(d);

    // Precompute descriptors and targets once per head; both are constants
    // for the whole run (stop-gradient contract).
    struct Prepared<T> {
        zq: Mat<T>,
        zk: Mat<T>,
        target: TargetDistribution<T>,
        n_tiles: usize,
    }
    let prepared: Vec<Prepared<T>> = samples
        .par_iter()
        .map(|s| -> Result<Prepared<T>, EstimatorError> {
            let zq = pool_descriptors(&tile(s.tensors.q(), &s.layout)?, cfg.pool_mode);
            let zk = pool_descriptors(&tile(s.tensors.k(), &s.layout)?, cfg.pool_mode);
            let n = s.tensors.n();
            let scores = if n * n <= DENSE_PROBS_LIMIT {
                target_scores_dense(&s.tensors, &s.layout)?
            } else {
                target_scores_streaming(&s.tensors, &s.layout, None)?
            };
            let target = row_normalize(&scores)?;
            Ok(Prepared { zq, zk, target, n_tiles: s.layout.n_tiles() })
        })
        .collect::<Result<_, _>>()?;

    let mut params = EstimatorParams {
        heads: (0..samples.len())
            .map(|h| xavier_head(d_in, d_hidden, d_latent, derive_seed(cfg.seed, h as u64)))
            .collect(),
        pool_mode: cfg.pool_mode,
        d_in,
        d_hidden,
        d_latent,
    };
    let mut state = TrainState {
        step: 0,
        first: params.heads.iter().map(|h| h.zeros_like()).collect(),
        second: params.heads.iter().map(|h| h.zeros_like()).collect(),
        lr: cfg.lr,
        loss_history: Vec::with_capacity(cfg.steps),
    };
    let row_salt = derive_seed(cfg.seed, 0x524f_5753);

    for step in 0..cfg.steps {
        let results: Vec<Result<(f64, HeadParams<T>), EstimatorError>> = params
            .heads
            .par_iter()
            .zip(prepared.par_iter())
            .enumerate()
            .map(|(h, (head, prep))| {
                let rows = cfg.row_fraction.map(|f| {
                    let seed =
                        derive_seed(row_salt, (step * samples.len() + h) as u64);
                    sample_query_rows(prep.n_tiles, f, seed)
                });
                loss_gradients(head, &prep.zq, &prep.zk, &prep.target, rows.as_ref())
            })
            .collect();

        state.step = step + 1;
        let mut mean_loss = 0.0f64;
        for (h, result) in results.into_iter().enumerate() {
            let (loss, grads) = result?;
            mean_loss += loss;
            adam_update(
                &mut params.heads[h],
                &grads,
                &mut state.first[h],
                &mut state.second[h],
                cfg,
                state.step,
            );
        }
        mean_loss /= samples.len() as f64;
        if !mean_loss.is_finite() {
            return Err(EstimatorError::Diverged { step });
        }
        state.loss_history.push(LossPoint { step, loss: mean_loss });
    }

    for head in &params.heads {
        if !head.is_finite() {
            return Err(EstimatorError::Diverged { step: cfg.steps });
        }
    }
    Ok(TrainOutcome { params, state })
}

fn xavier_head<T: Scalar>(d_in: usize, d_hidden: usize, d_out: usize, seed: u64) -> HeadParams<T> {
    let mut rng = SplitMix64::new(seed);
    let mut layer = |fan_in: usize, fan_out: usize| {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Mat::from_fn(fan_in, fan_out, |_, _| T::from_f64_lossy(rng.next_range(-limit, limit)))
    };
    let mut mlp = || MlpParams {
        w1: layer(d_in, d_hidden),
        b1: vec![T::zero(); d_hidden],
        w2: layer(d_hidden, d_out),
        b2: vec![T::zero(); d_out],
    };
    HeadParams { phi_q: mlp(), phi_k: mlp() }
}

fn adam_update<T: Scalar>(
    params: &mut HeadParams<T>,
    grads: &HeadParams<T>,
    first: &mut HeadParams<T>,
    second: &mut HeadParams<T>,
    cfg: &TrainConfig,
    step: usize,
) {
    let b1 = cfg.beta1;
    let b2 = cfg.beta2;
    let bias1 = 1.0 - b1.powi(step as i32);
    let bias2 = 1.0 - b2.powi(step as i32);
    let apply = |p: &mut [T], g: &[T], m: &mut [T], v: &mut [T]| {
        for i in 0..p.len() {
            let gi = g[i].to_f64_lossy();
            let mi = b1 * m[i].to_f64_lossy() + (1.0 - b1) * gi;
            let vi = b2 * v[i].to_f64_lossy() + (1.0 - b2) * gi * gi;
            m[i] = T::from_f64_lossy(mi);
            v[i] = T::from_f64_lossy(vi);
            let update = cfg.lr * (mi / bias1) / ((vi / bias2).sqrt() + cfg.eps);
            p[i] = T::from_f64_lossy(p[i].to_f64_lossy() - update);
        }
    };
    for side in 0..2 {
        let (p, g, m, v) = match side {
            0 => (&mut params.phi_q, &grads.phi_q, &mut first.phi_q, &mut second.phi_q),
            _ => (&mut params.phi_k, &grads.phi_k, &mut first.phi_k, &mut second.phi_k),
        };
        apply(p.w1.data_mut(), g.w1.data(), m.w1.data_mut(), v.w1.data_mut());
        apply(&mut p.b1, &g.b1, &mut m.b1, &mut v.b1);
        apply(p.w2.data_mut(), g.w2.data(), m.w2.data_mut(), v.w2.data_mut());
        apply(&mut p.b2, &g.b2, &mut m.b2, &mut v.b2);
    }
}
