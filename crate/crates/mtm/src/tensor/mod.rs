//! Dense tensors and a tape-based reverse-mode autodiff engine.
//!
//! Everything the matching network computes is expressed as operations
//! recorded on a [`Tape`]; calling [`Tape::backward`] on a scalar node
//! propagates gradients to every leaf. [`check::grad_check`] compares
//! tape gradients against central finite differences.

mod tape;
pub mod check;

pub use tape::{NodeId, Tape};

use thiserror::Error;

/// Guard against division by a vanishing norm in cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;
/// Guard against a cancelled attention-weight sum.
pub const ATTENTIVE_EPS: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} does not match data length {len}")]
    ShapeDataMismatch { shape: Vec<usize>, len: usize },
    #[error("sequence too short: length {len} < pooling size {ps}")]
    SequenceTooShort { len: usize, ps: usize },
    #[error("gradient check requires a deterministic graph, but dropout was recorded in train mode")]
    StochasticGraph,
    #[error("finite-difference step {h} outside [1e-4, 1e-2]")]
    BadStep { h: f64 },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
}

/// A dense row-major array of `f64` values.
///
/// Rank is 1 or 2 in practice; a rank-1 tensor of length `n` behaves as a
/// `1 x n` row where a matrix is expected.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::ShapeDataMismatch { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1, 1], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix (rank-1 counts as one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Number of columns when viewed as a matrix.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 0,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `c = a (m x k) * b (k x n)`, optionally accumulating into `c`.
pub(crate) fn mm_nn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, c: &mut [f64], acc: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // Single-row products dominate the recurrent layers; a direct sweep over
    // the rows of `b` avoids the packing work a general GEMM does per call.
    if m == 1 {
        if !acc {
            c.fill(0.0);
        }
        for (ai, brow) in a.iter().zip(b.chunks_exact(n)) {
            if *ai == 0.0 {
                continue;
            }
            for (ci, bi) in c.iter_mut().zip(brow) {
                *ci += ai * bi;
            }
        }
        return;
    }
    let beta = if acc { 1.0 } else { 0.0 };
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c = a^T (m x k) * b (k x n)` where `a` is stored as `k x m`.
pub(crate) fn mm_tn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, c: &mut [f64], acc: bool) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let beta = if acc { 1.0 } else { 0.0 };
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c = a (m x k) * b^T (k x n)` where `b` is stored as `n x k`.
pub(crate) fn mm_nt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, c: &mut [f64], acc: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    // As in `mm_nn`, skip the GEMM machinery for single-row products: each
    // output is a dot product of `a` with one row of `b`.
    if m == 1 {
        for (ci, brow) in c.iter_mut().zip(b.chunks_exact(k)) {
            let dot: f64 = a.iter().zip(brow).map(|(x, y)| x * y).sum();
            if acc {
                *ci += dot;
            } else {
                *ci = dot;
            }
        }
        return;
    }
    let beta = if acc { 1.0 } else { 0.0 };
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert_eq!(err, TensorError::ShapeDataMismatch { shape: vec![2, 3], len: 5 });
    }

    #[test]
    fn rank1_acts_as_row() {
        let v = Tensor::vector(vec![1.0, 2.0, 3.0]);
        assert_eq!(v.rows(), 1);
        assert_eq!(v.cols(), 3);
        assert_eq!(v.row(0), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn gemm_against_triple_loop() {
        // Independent brute-force product for a random 3x4 by 4x2 case.
        let a: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..8).map(|i| (i as f64 * 0.73).cos()).collect();
        let mut c = vec![0.0; 6];
        mm_nn(&a, 3, 4, &b, 2, &mut c, false);
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a[i * 4 + k] * b[k * 2 + j];
                }
                assert!((c[i * 2 + j] - s).abs() < 1e-12);
            }
        }
    }
}
