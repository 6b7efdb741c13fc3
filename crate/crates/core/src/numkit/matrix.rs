//! Dense row-major matrices with the handful of operations the pipeline
//! needs: products, transposes, LU factorization with a signed
//! log-determinant, inversion, and norms.
//!
//! Everything is exact-order arithmetic (no blocking, no reassociation) so
//! results are bit-reproducible for a fixed input.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

/// Shape or value errors raised by the numeric substrate.
#[derive(Debug, Error, PartialEq)]
pub enum NumError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
}

/// Dense matrix, row-major storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Real> Matrix<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![F::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = F::one();
        }
        m
    }

    /// Build from a row-major buffer; checks length and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Result<Self, NumError> {
        if data.len() != rows * cols {
            return Err(NumError::Shape {
                expected: format!("{} entries", rows * cols),
                got: format!("{}", data.len()),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumError::NonFinite(i));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self, NumError> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(NumError::Shape {
                    expected: format!("{c} columns"),
                    got: format!("{}", row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Self::from_vec(r, c, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> F {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: F) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[F] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix<F> {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.get(i, j);
            }
        }
        out
    }

    /// `self * other`
    pub fn matmul(&self, other: &Matrix<F>) -> Matrix<F> {
        assert_eq!(self.cols, other.rows, "matmul inner dimensions");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == F::zero() {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d = *d + a * b;
                }
            }
        }
        out
    }

    /// `self * x` for a column vector `x`.
    pub fn matvec(&self, x: &[F]) -> Vec<F> {
        assert_eq!(self.cols, x.len(), "matvec dimension");
        let mut out = vec![F::zero(); self.rows];
        for i in 0..self.rows {
            let mut acc = F::zero();
            for (a, b) in self.row(i).iter().zip(x) {
                acc = acc + *a * *b;
            }
            out[i] = acc;
        }
        out
    }

    /// `self^T * x`.
    pub fn matvec_t(&self, x: &[F]) -> Vec<F> {
        assert_eq!(self.rows, x.len(), "matvec_t dimension");
        let mut out = vec![F::zero(); self.cols];
        for i in 0..self.rows {
            let xi = x[i];
            if xi == F::zero() {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o = *o + a * xi;
            }
        }
        out
    }

    /// `self += scale * I`; square only.
    pub fn add_scaled_identity(&mut self, scale: F) {
        assert!(self.is_square());
        for i in 0..self.rows {
            let v = self.get(i, i);
            self.set(i, i, v + scale);
        }
    }

    /// `self += scale * other`, elementwise.
    pub fn add_scaled(&mut self, other: &Matrix<F>, scale: F) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + scale * b;
        }
    }

    pub fn scale(&mut self, s: F) {
        for a in self.data.iter_mut() {
            *a = *a * s;
        }
    }

    /// Outer product `x * y^T`.
    pub fn outer(x: &[F], y: &[F]) -> Matrix<F> {
        let mut m = Self::zeros(x.len(), y.len());
        for (i, &xi) in x.iter().enumerate() {
            for (j, &yj) in y.iter().enumerate() {
                m.data[i * y.len() + j] = xi * yj;
            }
        }
        m
    }

    pub fn frobenius_norm(&self) -> F {
        self.data.iter().fold(F::zero(), |acc, &v| acc + v * v).sqrt()
    }

    /// Largest singular value via power iteration on `A^T A`.
    ///
    /// Deterministic: starts from the all-ones vector and runs a fixed
    /// iteration count, which is plenty for the small matrices used here.
    pub fn spectral_norm(&self, iters: usize) -> F {
        if self.data.iter().all(|&v| v == F::zero()) {
            return F::zero();
        }
        let mut v = vec![F::one(); self.cols];
        let mut norm = F::zero();
        for _ in 0..iters.max(1) {
            let av = self.matvec(&v);
            let atav = self.matvec_t(&av);
            norm = atav.iter().fold(F::zero(), |acc, &x| acc + x * x).sqrt().sqrt();
            let len = atav.iter().fold(F::zero(), |acc, &x| acc + x * x).sqrt();
            if len == F::zero() {
                return F::zero();
            }
            v = atav.iter().map(|&x| x / len).collect();
        }
        // One more multiply for the Rayleigh estimate of sigma_max.
        let av = self.matvec(&v);
        let num = av.iter().fold(F::zero(), |acc, &x| acc + x * x).sqrt();
        if num.is_finite() && num > F::zero() {
            num
        } else {
            norm
        }
    }

    /// Rescale so the spectral norm does not exceed `bound`; no-op when it
    /// already complies.
    pub fn clamp_spectral_norm(&mut self, bound: F, iters: usize) {
        let s = self.spectral_norm(iters);
        if s > bound && s > F::zero() {
            self.scale(bound / s);
        }
    }

    /// Rescale so the Frobenius norm does not exceed `bound`.
    pub fn clamp_frobenius_norm(&mut self, bound: F) {
        let s = self.frobenius_norm();
        if s > bound && s > F::zero() {
            self.scale(bound / s);
        }
    }

    /// Signed log-determinant via LU with partial pivoting.
    ///
    /// Returns `(sign, logabs)` with `sign * exp(logabs) == det` up to
    /// rounding. An exactly singular matrix yields `(0, -inf)` rather than an
    /// error so callers can apply their own jitter policy.
    pub fn slogdet(&self) -> Result<(i8, F), NumError> {
        if !self.is_square() {
            return Err(NumError::NotSquare { rows: self.rows, cols: self.cols });
        }
        let n = self.rows;
        let mut lu = self.data.clone();
        let mut sign = 1i8;
        let mut logabs = F::zero();
        for col in 0..n {
            // pivot: largest absolute value in this column at or below the diagonal
            let mut pivot_row = col;
            let mut pivot_abs = lu[col * n + col].abs();
            for r in (col + 1)..n {
                let a = lu[r * n + col].abs();
                if a > pivot_abs {
                    pivot_abs = a;
                    pivot_row = r;
                }
            }
            if pivot_abs == F::zero() {
                return Ok((0, F::neg_infinity()));
            }
            if pivot_row != col {
                for j in 0..n {
                    lu.swap(col * n + j, pivot_row * n + j);
                }
                sign = -sign;
            }
            let pivot = lu[col * n + col];
            if pivot < F::zero() {
                sign = -sign;
            }
            logabs = logabs + pivot.abs().ln();
            for r in (col + 1)..n {
                let factor = lu[r * n + col] / pivot;
                lu[r * n + col] = factor;
                for j in (col + 1)..n {
                    let v = lu[r * n + j] - factor * lu[col * n + j];
                    lu[r * n + j] = v;
                }
            }
        }
        Ok((sign, logabs))
    }

    /// Inverse via LU with partial pivoting; `None` when singular.
    pub fn inverse(&self) -> Option<Matrix<F>> {
        assert!(self.is_square(), "inverse of non-square matrix");
        let n = self.rows;
        let mut lu = self.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for col in 0..n {
            let mut pivot_row = col;
            let mut pivot_abs = lu[col * n + col].abs();
            for r in (col + 1)..n {
                let a = lu[r * n + col].abs();
                if a > pivot_abs {
                    pivot_abs = a;
                    pivot_row = r;
                }
            }
            if pivot_abs == F::zero() {
                return None;
            }
            if pivot_row != col {
                for j in 0..n {
                    lu.swap(col * n + j, pivot_row * n + j);
                }
                perm.swap(col, pivot_row);
            }
            let pivot = lu[col * n + col];
            for r in (col + 1)..n {
                let factor = lu[r * n + col] / pivot;
                lu[r * n + col] = factor;
                for j in (col + 1)..n {
                    let v = lu[r * n + j] - factor * lu[col * n + j];
                    lu[r * n + j] = v;
                }
            }
        }
        let mut inv = Matrix::zeros(n, n);
        let mut col_buf = vec![F::zero(); n];
        for e in 0..n {
            // solve L U x = P e_e
            for (i, b) in col_buf.iter_mut().enumerate() {
                *b = if perm[i] == e { F::one() } else { F::zero() };
            }
            for i in 1..n {
                let mut acc = col_buf[i];
                for j in 0..i {
                    acc = acc - lu[i * n + j] * col_buf[j];
                }
                col_buf[i] = acc;
            }
            for i in (0..n).rev() {
                let mut acc = col_buf[i];
                for j in (i + 1)..n {
                    acc = acc - lu[i * n + j] * col_buf[j];
                }
                col_buf[i] = acc / lu[i * n + i];
            }
            for i in 0..n {
                inv.set(i, e, col_buf[i]);
            }
        }
        Some(inv)
    }
}

/// Dot product in fixed order.
pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Euclidean norm.
pub fn norm2<F: Real>(a: &[F]) -> F {
    dot(a, a).sqrt()
}

/// `a - b` elementwise.
pub fn sub<F: Real>(a: &[F], b: &[F]) -> Vec<F> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x - y).collect()
}

/// `out += scale * a` elementwise.
pub fn axpy<F: Real>(out: &mut [F], a: &[F], scale: F) {
    debug_assert_eq!(out.len(), a.len());
    for (o, &v) in out.iter_mut().zip(a) {
        *o = *o + scale * v;
    }
}
