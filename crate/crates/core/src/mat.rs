//! Small row-major dense matrix used throughout the crate.
//!
//! Everything here is deliberately minimal: the workloads are desk scale and
//! the kernels that matter (attention, pooling) live next to their modules.

use crate::scalar::Scalar;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    /// Builds a matrix from row-major data. Panics if the length is wrong.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "row-major data length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// `self * other`, accumulating in `T`.
    pub fn mul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "inner dimension mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = out.row_mut(i);
            for (kk, &av) in a.iter().enumerate() {
                let b = other.row(kk);
                for (ov, &bv) in o.iter_mut().zip(b) {
                    *ov += av * bv;
                }
            }
        }
        out
    }

    /// `self * other^T`: both operands row-major with matching column counts.
    pub fn mul_nt(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.cols, "inner dimension mismatch");
        Self::from_fn(self.rows, other.rows, |i, j| dot(self.row(i), other.row(j)))
    }

    /// `self^T * other`.
    pub fn mul_tn(&self, other: &Self) -> Self {
        assert_eq!(self.rows, other.rows, "inner dimension mismatch");
        let mut out = Self::zeros(self.cols, other.cols);
        for kk in 0..self.rows {
            let a = self.row(kk);
            let b = other.row(kk);
            for (i, &av) in a.iter().enumerate() {
                let o = out.row_mut(i);
                for (ov, &bv) in o.iter_mut().zip(b) {
                    *ov += av * bv;
                }
            }
        }
        out
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.to_f64_lossy() - b.to_f64_lossy()).abs())
            .fold(0.0, f64::max)
    }

    /// Squared Frobenius norm of `self - other`, accumulated in f64.
    pub fn frob_diff_sq(&self, other: &Self) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = a.to_f64_lossy() - b.to_f64_lossy();
                d * d
            })
            .sum()
    }
}

/// Dot product accumulated in `T`.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// A matrix whose rows are grouped into `n_tiles` contiguous tiles of `b`
/// rows each; entry `(i, j)` of the tiled view is row `i * b + j`.
#[derive(Clone, Debug, PartialEq)]
pub struct TiledMat<T> {
    mat: Mat<T>,
    n_tiles: usize,
    b: usize,
}

impl<T: Scalar> TiledMat<T> {
    pub fn new(mat: Mat<T>, n_tiles: usize, b: usize) -> Self {
        assert_eq!(mat.rows(), n_tiles * b, "tiled row count mismatch");
        Self { mat, n_tiles, b }
    }

    pub fn n_tiles(&self) -> usize {
        self.n_tiles
    }

    pub fn tile_rows(&self) -> usize {
        self.b
    }

    pub fn cols(&self) -> usize {
        self.mat.cols()
    }

    /// Row `j` of tile `i`.
    pub fn row(&self, i: usize, j: usize) -> &[T] {
        self.mat.row(i * self.b + j)
    }

    pub fn as_mat(&self) -> &Mat<T> {
        &self.mat
    }

    pub fn into_mat(self) -> Mat<T> {
        self.mat
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mul_nt_matches_explicit_loops() {
        let a = Mat::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.5);
        let b = Mat::from_fn(2, 4, |i, j| (i + j) as f64);
        let c = a.mul_nt(&b);
        for i in 0..3 {
            for j in 0..2 {
                let mut want = 0.0;
                for kk in 0..4 {
                    want += a.get(i, kk) * b.get(j, kk);
                }
                assert!((c.get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mul_tn_matches_explicit_loops() {
        let a = Mat::from_fn(4, 3, |i, j| (i as f64 - j as f64) * 0.25);
        let b = Mat::from_fn(4, 2, |i, j| (i * 2 + j) as f64);
        let c = a.mul_tn(&b);
        assert_eq!((c.rows(), c.cols()), (3, 2));
        for i in 0..3 {
            for j in 0..2 {
                let mut want = 0.0;
                for kk in 0..4 {
                    want += a.get(kk, i) * b.get(kk, j);
                }
                assert!((c.get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frob_diff_known_case() {
        let a = Mat::from_vec(2, 2, vec![1.0f32, 0.0, 0.0, 1.0]);
        let b = Mat::zeros(2, 2);
        assert_eq!(a.frob_diff_sq(&b), 2.0);
    }
}
