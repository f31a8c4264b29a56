//! Minimal dense numeric substrate: row-major matrices plus the handful of
//! kernels the model needs.
//!
//! Every reduction runs in a fixed left-to-right order so results are
//! bit-reproducible across runs and across the different prefill paths that
//! must agree bit-for-bit.

use crate::parallel::for_each_row;
use crate::scalar::Scalar;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TensorError {
    #[error("matmul dimension mismatch: left is {m}x{k}, right is {k2}x{n}")]
    MatmulShape { m: usize, k: usize, k2: usize, n: usize },
    #[error("data length {len} does not match shape {rows}x{cols}")]
    DataShape { len: usize, rows: usize, cols: usize },
}

/// Row-major 2D array.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::DataShape { len: data.len(), rows, cols });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> S {
        self.data[i * self.cols + j]
    }

    pub fn transpose(&self) -> Matrix<S> {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Standard matrix product with a fixed left-to-right reduction over the
    /// inner dimension.
    pub fn matmul(&self, rhs: &Matrix<S>) -> Result<Matrix<S>, TensorError> {
        if self.cols != rhs.rows {
            return Err(TensorError::MatmulShape {
                m: self.rows,
                k: self.cols,
                k2: rhs.rows,
                n: rhs.cols,
            });
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        let k_dim = self.cols;
        let n = rhs.cols;
        let lhs = &self.data;
        let rhs_data = &rhs.data;
        for_each_row(&mut out.data, n, |i, out_row| {
            let a_row = &lhs[i * k_dim..(i + 1) * k_dim];
            for (j, out_v) in out_row.iter_mut().enumerate() {
                let mut acc = S::zero();
                for k in 0..k_dim {
                    acc = acc + a_row[k] * rhs_data[k * n + j];
                }
                *out_v = acc;
            }
        });
        debug_assert!(out.is_finite());
        Ok(out)
    }

    /// `self [m x k]` times the transpose of `rhs [n x k]`.
    ///
    /// Same reduction order as [`Matrix::matmul`] with a pre-transposed
    /// right operand, so the two routes agree bit-for-bit. This is the hot
    /// path: weights are stored `[out_dim x in_dim]` so both operands stream
    /// contiguously.
    pub fn matmul_nt(&self, rhs: &Matrix<S>) -> Result<Matrix<S>, TensorError> {
        if self.cols != rhs.cols {
            return Err(TensorError::MatmulShape {
                m: self.rows,
                k: self.cols,
                k2: rhs.cols,
                n: rhs.rows,
            });
        }
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        let k_dim = self.cols;
        let n = rhs.rows;
        let lhs = &self.data;
        let rhs_data = &rhs.data;
        for_each_row(&mut out.data, n, |i, out_row| {
            let a_row = &lhs[i * k_dim..(i + 1) * k_dim];
            for (j, out_v) in out_row.iter_mut().enumerate() {
                *out_v = dot(a_row, &rhs_data[j * k_dim..(j + 1) * k_dim]);
            }
        });
        debug_assert!(out.is_finite());
        Ok(out)
    }

    /// Row-wise softmax of `scale * x` with mandatory max-subtraction.
    pub fn softmax_rows(&self, scale: S) -> Matrix<S> {
        let mut out = self.clone();
        let cols = self.cols;
        for_each_row(&mut out.data, cols, |_, row| {
            for v in row.iter_mut() {
                *v = scale * *v;
            }
            softmax_row(row);
        });
        out
    }
}

/// Fixed left-to-right dot product.
#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = S::zero();
    for k in 0..a.len() {
        acc = acc + a[k] * b[k];
    }
    acc
}

/// In-place softmax of one row: `exp(x - max) / sum`.
///
/// Entries at or below `x_max - 1e9/2` underflow to exactly zero, which is
/// what makes additive `-1e9` masking equivalent to dropping the pair.
pub fn softmax_row<S: Scalar>(row: &mut [S]) {
    if row.is_empty() {
        return;
    }
    let mut max = row[0];
    for &v in &row[1..] {
        if v > max {
            max = v;
        }
    }
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// `x * gain / sqrt(mean(x^2) + eps)`.
pub fn rms_norm<S: Scalar>(x: &[S], gain: &[S], eps: S) -> Vec<S> {
    assert_eq!(x.len(), gain.len(), "rms_norm length mismatch");
    let mut out = vec![S::zero(); x.len()];
    rms_norm_into(x, gain, eps, &mut out);
    out
}

pub(crate) fn rms_norm_into<S: Scalar>(x: &[S], gain: &[S], eps: S, out: &mut [S]) {
    let mut sq = S::zero();
    for &v in x {
        sq = sq + v * v;
    }
    let denom = (sq / scalar_len::<S>(x.len()) + eps).sqrt();
    for i in 0..x.len() {
        out[i] = x[i] * gain[i] / denom;
    }
}

#[inline]
fn scalar_len<S: Scalar>(n: usize) -> S {
    S::from_usize(n).expect("length fits scalar")
}

/// `x * sigmoid(x)` elementwise.
pub fn silu<S: Scalar>(x: &[S]) -> Vec<S> {
    x.iter().map(|&v| silu_scalar(v)).collect()
}

#[inline]
pub(crate) fn silu_scalar<S: Scalar>(v: S) -> S {
    v / (S::one() + (-v).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn mat(rows: usize, cols: usize, v: &[f32]) -> Matrix<f32> {
        Matrix::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let i2 = mat(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let m = mat(2, 2, &[3.0, -1.5, 2.25, 7.0]);
        assert_eq!(i2.matmul(&m).unwrap(), m);
    }

    #[test]
    fn matmul_hand_case() {
        let a = mat(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = mat(2, 2, &[5.0, 6.0, 7.0, 8.0]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let z = Matrix::<f32>::zeros(2, 2);
        let m = mat(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(z.matmul(&m).unwrap(), Matrix::zeros(2, 2));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Matrix::<f32>::zeros(2, 3);
        let b = Matrix::<f32>::zeros(2, 2);
        let err = a.matmul(&b).unwrap_err();
        assert_eq!(err.to_string(), "matmul dimension mismatch: left is 2x3, right is 2x2");
    }

    #[test]
    fn matmul_nt_matches_matmul_bitwise() {
        let mut rng = SplitMix64::new(11);
        let a = Matrix::from_vec(
            5,
            7,
            (0..35).map(|_| rng.next_unit_f64() as f32 - 0.5).collect(),
        )
        .unwrap();
        let b = Matrix::from_vec(
            4,
            7,
            (0..28).map(|_| rng.next_unit_f64() as f32 - 0.5).collect(),
        )
        .unwrap();
        let via_nt = a.matmul_nt(&b).unwrap();
        let via_t = a.matmul(&b.transpose()).unwrap();
        assert_eq!(via_nt, via_t);
    }

    #[test]
    fn softmax_uniform_row() {
        let m = mat(1, 3, &[0.0, 0.0, 0.0]);
        let s = m.softmax_rows(1.0);
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_masked_limit() {
        let m = mat(1, 2, &[-1e9, 0.0]);
        let s = m.softmax_rows(1.0);
        assert_eq!(s.get(0, 0), 0.0);
        assert_eq!(s.get(0, 1), 1.0);
    }

    #[test]
    fn softmax_reference_row() {
        let m = mat(1, 3, &[1.0, 2.0, 3.0]);
        let s = m.softmax_rows(1.0);
        let expected = [0.09003f32, 0.24473, 0.66524];
        for (got, want) in s.data().iter().zip(expected) {
            assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        }
    }

    #[test]
    fn rms_norm_unit_input() {
        let x = vec![1.0f32; 8];
        let g = vec![1.0f32; 8];
        let out = rms_norm(&x, &g, 0.0);
        for v in out {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rms_norm_hand_case() {
        let out = rms_norm(&[3.0f32, 4.0], &[1.0, 1.0], 0.0);
        assert!((out[0] - 0.8485).abs() < 1e-4);
        assert!((out[1] - 1.1314).abs() < 1e-4);
    }

    #[test]
    fn rms_norm_zero_gain() {
        let out = rms_norm(&[3.0f32, 4.0], &[0.0, 0.0], 0.0);
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn silu_values() {
        assert_eq!(silu_scalar(0.0f32), 0.0);
        assert!((silu_scalar(1.0f32) - 0.7311).abs() < 1e-4);
        // silu(-x) == -x + silu(x), from sigmoid(-x) = 1 - sigmoid(x).
        let x = 2.0f32;
        assert!((silu_scalar(-x) - (-x + silu_scalar(x))).abs() < 1e-6);
    }

    #[test]
    fn softmax_thousand_random_rows_sum_to_one() {
        let mut rng = SplitMix64::new(3131);
        for trial in 0..1000 {
            let cols = 1 + rng.next_below(64) as usize;
            let data: Vec<f32> = (0..cols)
                .map(|_| (rng.next_unit_f64() as f32 * 2.0 - 1.0) * 1e4)
                .collect();
            let m = Matrix::from_vec(1, cols, data).unwrap();
            let s = m.softmax_rows(1.0);
            let sum: f32 = s.row(0).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "trial {trial}: sum {sum}");
        }
    }

    proptest! {
        #[test]
        fn matmul_associative_within_tolerance(vals in proptest::collection::vec(-2.0f32..2.0, 48)) {
            let a = mat(4, 4, &vals[0..16]);
            let b = mat(4, 4, &vals[16..32]);
            let c = mat(4, 4, &vals[32..48]);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (l, r) in left.data().iter().zip(right.data()) {
                prop_assert!((l - r).abs() < 1e-4);
            }
        }

        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-1e4f32..1e4, 16)) {
            let m = mat(2, 8, &vals);
            let s = m.softmax_rows(1.0);
            for i in 0..2 {
                let sum: f32 = s.row(i).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn rms_norm_output_rms_is_one(vals in proptest::collection::vec(-5.0f32..5.0, 16)) {
            prop_assume!(vals.iter().any(|v| v.abs() > 1e-3));
            let gain = vec![1.0f32; 16];
            let out = rms_norm(&vals, &gain, 0.0);
            let rms = (out.iter().map(|v| v * v).sum::<f32>() / 16.0).sqrt();
            prop_assert!((rms - 1.0).abs() < 1e-5);
        }
    }
}
