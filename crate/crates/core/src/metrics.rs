//! Mask-quality metrics and executable diagnostics for the dispersion and
//! renormalization bounds the estimator design leans on.
//!
//! Inputs are generic over [`Scalar`] but every reduction here accumulates
//! in f64, so identities stated at 1e-6 relative tolerance hold for 32-bit
//! inputs.

use thiserror::Error;

use crate::attention::TileMask;
use crate::mat::Mat;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("masks must share shape and budget: {a_tiles}x k={a_k} vs {b_tiles}x k={b_k}")]
    BudgetMismatch { a_tiles: usize, a_k: usize, b_tiles: usize, b_k: usize },
    #[error("retained index set is empty")]
    EmptyRetained,
    #[error("retained index {index} out of range for {n} logits")]
    RetainedOutOfRange { index: usize, n: usize },
    #[error("temperature must be positive, got {tau}")]
    InvalidTemperature { tau: f64 },
    #[error("vectors must have equal nonzero length, got {a} and {b}")]
    LengthMismatch { a: usize, b: usize },
}

/// Per-row and total confusion counts between two equal-budget masks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskConfusion {
    pub rows: Vec<RowConfusion>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RowConfusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

fn check_budgets(pred: &TileMask, reference: &TileMask) -> Result<(), MetricsError> {
    if pred.n_tiles() != reference.n_tiles() || pred.k() != reference.k() {
        return Err(MetricsError::BudgetMismatch {
            a_tiles: pred.n_tiles(),
            a_k: pred.k(),
            b_tiles: reference.n_tiles(),
            b_k: reference.k(),
        });
    }
    Ok(())
}

/// Mean over query rows of `|pred_row intersect ref_row| / k`.
pub fn tile_recall(pred: &TileMask, reference: &TileMask) -> Result<f64, MetricsError> {
    check_budgets(pred, reference)?;
    let c = mask_confusion(pred, reference)?;
    Ok(c.tp as f64 / (pred.n_tiles() * pred.k()) as f64)
}

/// Standard per-row set-difference counts. With equal budgets, `tp + fp`
/// and `tp + fn` both equal `k` on every row.
pub fn mask_confusion(pred: &TileMask, reference: &TileMask) -> Result<MaskConfusion, MetricsError> {
    check_budgets(pred, reference)?;
    let mut rows = Vec::with_capacity(pred.n_tiles());
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for i in 0..pred.n_tiles() {
        let hit = pred.row(i).iter().filter(|&&j| reference.is_selected(i, j)).count();
        let row = RowConfusion { tp: hit, fp: pred.k() - hit, fn_: reference.k() - hit };
        tp += row.tp;
        fp += row.fp;
        fn_ += row.fn_;
        rows.push(row);
    }
    Ok(MaskConfusion { rows, tp, fp, fn_ })
}

/// Frobenius norm of `o_ref - o_test`, accumulated in f64.
pub fn output_error<T: Scalar>(o_ref: &Mat<T>, o_test: &Mat<T>) -> f64 {
    o_ref.frob_diff_sq(o_test).sqrt()
}

/// Outcome of the masked-softmax renormalization identity check
/// `P~_j = (Z / Z^) P_j` over the retained index set.
#[derive(Clone, Debug)]
pub struct RenormReport {
    pub z: f64,
    pub z_hat: f64,
    /// `P~_j / P_j` per retained index; identical to `z / z_hat` up to
    /// rounding.
    pub ratios: Vec<f64>,
    pub max_deviation: f64,
}

/// Computes softmax over all logits and over the retained subset separately,
/// then reports the worst absolute deviation from `P~_j = (Z / Z^) P_j`.
pub fn renormalization_check<T: Scalar>(
    logits: &[T],
    retained: &[usize],
    tau: f64,
) -> Result<RenormReport, MetricsError> {
    if retained.is_empty() {
        return Err(MetricsError::EmptyRetained);
    }
    if tau <= 0.0 {
        return Err(MetricsError::InvalidTemperature { tau });
    }
    let n = logits.len();
    for &j in retained {
        if j >= n {
            return Err(MetricsError::RetainedOutOfRange { index: j, n });
        }
    }
    let u: Vec<f64> = logits.iter().map(|&x| x.to_f64_lossy() / tau).collect();
    let m = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = u.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let z_hat: f64 = retained.iter().map(|&j| exps[j]).sum();
    let blow_up = z / z_hat;
    let mut ratios = Vec::with_capacity(retained.len());
    let mut max_dev = 0.0f64;
    for &j in retained {
        let p = exps[j] / z;
        let p_masked = exps[j] / z_hat;
        ratios.push(p_masked / p);
        max_dev = max_dev.max((p_masked - blow_up * p).abs());
    }
    Ok(RenormReport { z, z_hat, ratios, max_deviation: max_dev })
}

/// Splits `q . k` into `d*mu_q*mu_k` plus `d*Cov(q, k)`; the two terms sum
/// back to the dot product.
pub fn dot_decomposition<T: Scalar>(q: &[T], k: &[T]) -> Result<(f64, f64), MetricsError> {
    if q.len() != k.len() || q.is_empty() {
        return Err(MetricsError::LengthMismatch { a: q.len(), b: k.len() });
    }
    let d = q.len() as f64;
    let mu_q: f64 = q.iter().map(|&x| x.to_f64_lossy()).sum::<f64>() / d;
    let mu_k: f64 = k.iter().map(|&x| x.to_f64_lossy()).sum::<f64>() / d;
    let cov: f64 = q
        .iter()
        .zip(k)
        .map(|(&a, &b)| (a.to_f64_lossy() - mu_q) * (b.to_f64_lossy() - mu_k))
        .sum::<f64>()
        / d;
    Ok((d * mu_q * mu_k, d * cov))
}

/// Coordinate statistics of one vector: mean, min, max, population std.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VectorStats {
    pub mu: f64,
    pub mn: f64,
    pub mx: f64,
    pub sigma: f64,
}

impl VectorStats {
    pub fn from_slice<T: Scalar>(v: &[T]) -> Self {
        assert!(!v.is_empty());
        let n = v.len() as f64;
        let mut mn = f64::INFINITY;
        let mut mx = f64::NEG_INFINITY;
        let mut sum = 0.0f64;
        for &x in v {
            let x = x.to_f64_lossy();
            mn = mn.min(x);
            mx = mx.max(x);
            sum += x;
        }
        let mu = sum / n;
        let var = v.iter().map(|&x| (x.to_f64_lossy() - mu).powi(2)).sum::<f64>() / n;
        Self { mu, mn, mx, sigma: var.sqrt() }
    }

    /// Dispersion bound `sqrt((M - mu)(mu - m))`.
    pub fn delta(&self) -> f64 {
        ((self.mx - self.mu) * (self.mu - self.mn)).max(0.0).sqrt()
    }
}

/// Variance bound from extrema: returns `(sigma^2, (M - mu)(mu - m), slack)`.
pub fn bhatia_davis<T: Scalar>(v: &[T]) -> (f64, f64, f64) {
    let s = VectorStats::from_slice(v);
    let var = s.sigma * s.sigma;
    let bound = (s.mx - s.mu) * (s.mu - s.mn);
    (var, bound, bound - var)
}

/// Residual interaction error of representing two `b x d` tiles by their
/// means: `E = |sum_i <r_q_i, r_k_i>|` against the Cauchy-Schwarz bound
/// `B * sigma_q * sigma_k`, with `sigma^2` the mean squared residual norm.
pub fn residual_bound<T: Scalar>(tq: &Mat<T>, tk: &Mat<T>) -> Result<(f64, f64), MetricsError> {
    if tq.rows() != tk.rows() || tq.cols() != tk.cols() || tq.rows() == 0 {
        return Err(MetricsError::LengthMismatch { a: tq.rows(), b: tk.rows() });
    }
    let b = tq.rows();
    let d = tq.cols();
    let mean = |m: &Mat<T>| -> Vec<f64> {
        let mut mu = vec![0.0f64; d];
        for i in 0..b {
            for (acc, &x) in mu.iter_mut().zip(m.row(i)) {
                *acc += x.to_f64_lossy();
            }
        }
        mu.iter_mut().for_each(|x| *x /= b as f64);
        mu
    };
    let mu_q = mean(tq);
    let mu_k = mean(tk);
    let mut e = 0.0f64;
    let mut sq = 0.0f64;
    let mut sk = 0.0f64;
    for i in 0..b {
        let mut cross = 0.0f64;
        for c in 0..d {
            let rq = tq.get(i, c).to_f64_lossy() - mu_q[c];
            let rk = tk.get(i, c).to_f64_lossy() - mu_k[c];
            cross += rq * rk;
            sq += rq * rq;
            sk += rk * rk;
        }
        e += cross;
    }
    let sigma_q = (sq / b as f64).sqrt();
    let sigma_k = (sk / b as f64).sqrt();
    Ok((e.abs(), b as f64 * sigma_q * sigma_k))
}

/// Statistics-only score approximation `d*mu_q*mu_k + lambda*Delta_q*Delta_k`.
pub fn approx_stat_score(sq: &VectorStats, sk: &VectorStats, d: usize, lambda: f64) -> f64 {
    d as f64 * sq.mu * sk.mu + lambda * sq.delta() * sk.delta()
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2);
    let rx = ranks(xs);
    let ry = ranks(ys);
    pearson(&rx, &ry)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).expect("finite values"));
    let mut out = vec![0.0f64; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    cov / (vx.sqrt() * vy.sqrt())
}
