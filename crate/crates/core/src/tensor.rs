//! Dense row-major matrices plus the activation and loss kernels everything
//! else builds on.
//!
//! Backward passes are hand-derived per kernel; there is no autodiff graph.
//! All storage is 64-bit and batches are laid out as rows, so a batch of B
//! samples with d features is a B x d matrix.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Errors from shape-checked matrix and loss operations.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("expected {rows}x{cols} = {expected} values, got {got}")]
    BadLength {
        rows: usize,
        cols: usize,
        expected: usize,
        got: usize,
    },
    #[error("matrix entries must be finite")]
    NonFinite,
    #[error("label {label} out of range for {classes} classes (row {row})")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },
}

/// Row-major dense matrix of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

/// Above this many multiply-adds, `matmul` splits output rows across threads.
/// Each output element is still accumulated serially over k, so results are
/// bit-identical to the single-threaded path.
const PAR_MATMUL_WORK: usize = 1 << 20;

impl DenseMatrix {
    /// Builds a matrix from row-major values, validating length and finiteness.
    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, TensorError> {
        let expected = rows * cols;
        if values.len() != expected {
            return Err(TensorError::BadLength {
                rows,
                cols,
                expected,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite);
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    /// Matrix with i.i.d. Gaussian entries of the given standard deviation.
    pub fn gaussian<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let values = (0..rows * cols)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.values[j * self.rows + i] = self.values[i * self.cols + j];
            }
        }
        out
    }

    /// `self * rhs`, row-major product.
    pub fn matmul(&self, rhs: &Self) -> Result<Self, TensorError> {
        if self.cols != rhs.rows {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        let n = rhs.cols;
        let row_kernel = |i: usize, out_row: &mut [f64]| {
            let a_row = &self.values[i * self.cols..(i + 1) * self.cols];
            for (k, &aik) in a_row.iter().enumerate() {
                let b_row = &rhs.values[k * n..k * n + n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += aik * b;
                }
            }
        };
        if self.rows * self.cols * n >= PAR_MATMUL_WORK && n > 0 {
            use rayon::prelude::*;
            out.values
                .par_chunks_mut(n)
                .enumerate()
                .for_each(|(i, out_row)| row_kernel(i, out_row));
        } else {
            for (i, out_row) in out.values.chunks_mut(n.max(1)).enumerate() {
                row_kernel(i, out_row);
            }
        }
        Ok(out)
    }

    /// `self * rhs^T`.
    pub fn matmul_transposed(&self, rhs: &Self) -> Result<Self, TensorError> {
        if self.cols != rhs.cols {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_transposed",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        self.matmul(&rhs.transpose())
    }

    /// `self^T * rhs`.
    pub fn transposed_matmul(&self, rhs: &Self) -> Result<Self, TensorError> {
        if self.rows != rhs.rows {
            return Err(TensorError::ShapeMismatch {
                op: "transposed_matmul",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        self.transpose().matmul(rhs)
    }

    /// `self += scale * other`, shape-checked.
    pub fn axpy(&mut self, scale: f64, other: &Self) -> Result<(), TensorError> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "axpy",
                left: self.shape(),
                right: other.shape(),
            });
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.values {
            *v *= s;
        }
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row_broadcast(&mut self, bias: &[f64]) -> Result<(), TensorError> {
        if bias.len() != self.cols {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_broadcast",
                left: self.shape(),
                right: (1, bias.len()),
            });
        }
        for row in self.values.chunks_mut(self.cols) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(())
    }

    /// Sum of each column; length equals `cols`.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for row in self.values.chunks(self.cols.max(1)) {
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        sums
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Index of the largest entry in each row.
    pub fn argmax_rows(&self) -> Vec<usize> {
        self.values
            .chunks(self.cols.max(1))
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// ReLU forward plus the gradient routed through it:
/// `y = max(x, 0)`, `dx = upstream` where `x > 0` and zero elsewhere.
pub fn relu_fwd_bwd(
    x: &DenseMatrix,
    upstream: &DenseMatrix,
) -> Result<(DenseMatrix, DenseMatrix), TensorError> {
    if x.shape() != upstream.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "relu_fwd_bwd",
            left: x.shape(),
            right: upstream.shape(),
        });
    }
    let mut y = x.clone();
    let mut dx = upstream.clone();
    for (yv, dv) in y.values.iter_mut().zip(dx.values.iter_mut()) {
        if *yv <= 0.0 {
            *yv = 0.0;
            *dv = 0.0;
        }
    }
    Ok((y, dx))
}

/// Mean negative log-likelihood of a softmax over row logits, with its
/// gradient `(softmax - onehot) / batch`. Row maxima are subtracted before
/// exponentiation for stability.
pub fn softmax_cross_entropy(
    logits: &DenseMatrix,
    labels: &[usize],
) -> Result<(f64, DenseMatrix), TensorError> {
    if labels.len() != logits.rows() {
        return Err(TensorError::ShapeMismatch {
            op: "softmax_cross_entropy",
            left: logits.shape(),
            right: (labels.len(), 1),
        });
    }
    let classes = logits.cols();
    for (row, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(TensorError::LabelOutOfRange {
                row,
                label,
                classes,
            });
        }
    }
    let batch = logits.rows();
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (row, &label) in grad.values.chunks_mut(classes).zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            denom += *v;
        }
        loss -= (row[label] / denom).ln();
        for v in row.iter_mut() {
            *v /= denom * batch as f64;
        }
        row[label] -= 1.0 / batch as f64;
    }
    Ok((loss / batch as f64, grad))
}

/// Mean squared error over all entries and its gradient
/// `2 (pred - target) / count`.
pub fn mse(pred: &DenseMatrix, target: &DenseMatrix) -> Result<(f64, DenseMatrix), TensorError> {
    if pred.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "mse",
            left: pred.shape(),
            right: target.shape(),
        });
    }
    let count = pred.values.len() as f64;
    let mut grad = pred.clone();
    let mut loss = 0.0;
    for (g, t) in grad.values.iter_mut().zip(&target.values) {
        let diff = *g - t;
        loss += diff * diff;
        *g = 2.0 * diff / count;
    }
    Ok((loss / count, grad))
}

/// Central-difference gradient of a scalar function, entry by entry:
/// `(f(x + eps e) - f(x - eps e)) / (2 eps)`.
pub fn finite_diff_grad<F>(f: F, x: &DenseMatrix, eps: f64) -> DenseMatrix
where
    F: Fn(&DenseMatrix) -> f64,
{
    assert!(eps > 0.0, "finite_diff_grad requires eps > 0");
    let mut grad = DenseMatrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for idx in 0..x.values.len() {
        let orig = probe.values[idx];
        probe.values[idx] = orig + eps;
        let plus = f(&probe);
        probe.values[idx] = orig - eps;
        let minus = f(&probe);
        probe.values[idx] = orig;
        grad.values[idx] = (plus - minus) / (2.0 * eps);
    }
    grad
}
