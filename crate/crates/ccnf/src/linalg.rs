//! Dense row-major matrices and the small set of vector kernels the rest of
//! the crate is built on.
//!
//! Everything is `f64`; tolerance-style checks at 1e-6 are not reliable in
//! single precision.

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// Builds a matrix from row-major data. Rejects length mismatches and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                what: "matrix data",
                expected: rows * cols,
                got: data.len(),
            });
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite {
                what: "matrix data",
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Sum of the main diagonal (square matrices).
    pub fn trace(&self) -> f64 {
        let n = self.rows.min(self.cols);
        (0..n).map(|i| self.get(i, i)).sum()
    }
}

/// `W·x + b`, validating shapes.
pub fn affine(w: &DenseMatrix, b: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if w.cols() != x.len() {
        return Err(Error::DimensionMismatch {
            what: "affine input",
            expected: w.cols(),
            got: x.len(),
        });
    }
    if w.rows() != b.len() {
        return Err(Error::DimensionMismatch {
            what: "affine bias",
            expected: w.rows(),
            got: b.len(),
        });
    }
    Ok(affine_unchecked(w, b, x))
}

pub(crate) fn affine_unchecked(w: &DenseMatrix, b: &[f64], x: &[f64]) -> Vec<f64> {
    let mut out = matvec_unchecked(w, x);
    for (o, bi) in out.iter_mut().zip(b) {
        *o += bi;
    }
    out
}

/// `W·x`, validating shapes.
pub fn matvec(w: &DenseMatrix, x: &[f64]) -> Result<Vec<f64>> {
    if w.cols() != x.len() {
        return Err(Error::DimensionMismatch {
            what: "matvec input",
            expected: w.cols(),
            got: x.len(),
        });
    }
    Ok(matvec_unchecked(w, x))
}

pub(crate) fn matvec_unchecked(w: &DenseMatrix, x: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(w.rows());
    for i in 0..w.rows() {
        let row = w.row(i);
        let mut acc = 0.0;
        for (wij, xj) in row.iter().zip(x) {
            acc += wij * xj;
        }
        out.push(acc);
    }
    out
}

/// `Wᵀ·x` without materializing the transpose.
pub(crate) fn matvec_transposed_unchecked(w: &DenseMatrix, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (i, xi) in x.iter().enumerate() {
        let row = w.row(i);
        for (o, wij) in out.iter_mut().zip(row) {
            *o += wij * xi;
        }
    }
    out
}

/// Elementwise tanh. Rejects non-finite inputs.
pub fn tanh_elementwise(x: &[f64]) -> Result<Vec<f64>> {
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { what: "tanh input" });
    }
    Ok(tanh_unchecked(x))
}

pub(crate) fn tanh_unchecked(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.tanh()).collect()
}

/// Inner product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean norm.
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|x| x.is_finite())
}

/// Solves the symmetric positive-definite system `A·x = b` by Cholesky
/// factorization. Errors if `A` is not positive definite.
pub fn solve_spd(a: &DenseMatrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows();
    if a.cols() != n || b.len() != n {
        return Err(Error::DimensionMismatch {
            what: "spd system",
            expected: n,
            got: b.len(),
        });
    }
    // Lower-triangular factor, row-major.
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::InvalidInput(
                        "matrix not positive definite; raise the regularization".into(),
                    ));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    // Forward then backward substitution.
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    Ok(x)
}
