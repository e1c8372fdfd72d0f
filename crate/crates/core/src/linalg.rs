//! Dense row-major matrices and a one-sided Jacobi SVD with threshold truncation.
//!
//! Everything here is a pure function of its inputs. The SVD is accurate to
//! roughly machine precision for the small parameter matrices this crate
//! deals with (tens of rows and columns), which is what the aggregation
//! step relies on when it discards small singular triples.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix contains non-finite entries")]
    NonFiniteInput,
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("operation requires at least one term")]
    Empty,
    #[error("matrix must have at least one row and one column")]
    Degenerate,
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Dense real matrix stored row-major.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{}) [", self.rows, self.cols)?;
        for r in 0..self.rows {
            if r > 0 {
                write!(f, "; ")?;
            }
            for c in 0..self.cols {
                if c > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{}", self.get(r, c))?;
            }
        }
        write!(f, "]")
    }
}

impl Matrix {
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
            m.set(i, i, 1.0);
        }
        m
    }

    /// Builds a matrix from row-major data. Panics if the length is wrong.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "data length {} does not match {rows}x{cols}",
            data.len()
        );
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self::from_vec(r, c, data)
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m.set(i, i, v);
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(LinalgError::NonFiniteInput)
        }
    }

    fn check_same_shape(&self, other: &Matrix) -> Result<()> {
        if self.shape() == other.shape() {
            Ok(())
        } else {
            Err(LinalgError::ShapeMismatch {
                expected: self.shape(),
                got: other.shape(),
            })
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(LinalgError::ShapeMismatch {
                expected: (self.cols, other.cols),
                got: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(LinalgError::ShapeMismatch {
                expected: (self.rows, other.cols),
                got: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(LinalgError::ShapeMismatch {
                expected: (other.rows, self.cols),
                got: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                let b_row = other.row(j);
                out.data[i * other.rows + j] = a_row.iter().zip(b_row).map(|(a, b)| a * b).sum();
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other)?;
        Ok(self.zip_with(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other)?;
        Ok(self.zip_with(other, |a, b| a - b))
    }

    /// `self += alpha · other`
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, alpha: f64) -> Matrix {
        self.map(|v| alpha * v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }
}

/// Thin singular value decomposition `A = u · diag(sigma) · vᵀ` with
/// `k = min(rows, cols)` triples in descending order.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// `u · diag(sigma) · vᵀ` restricted to the first `k` triples.
    pub fn reconstruct_top(&self, k: usize) -> Matrix {
        let m = self.u.rows();
        let n = self.v.rows();
        let mut out = Matrix::zeros(m, n);
        for j in 0..k.min(self.sigma.len()) {
            let s = self.sigma[j];
            if s == 0.0 {
                continue;
            }
            for r in 0..m {
                let us = self.u.get(r, j) * s;
                if us == 0.0 {
                    continue;
                }
                let row = out.row_mut(r);
                for (c, o) in row.iter_mut().enumerate() {
                    *o += us * self.v.get(c, j);
                }
            }
        }
        out
    }

    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_top(self.sigma.len())
    }
}

const JACOBI_MAX_SWEEPS: usize = 80;

/// Singular value decomposition by one-sided (Hestenes) Jacobi rotations.
pub fn svd(a: &Matrix) -> Result<SvdResult> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(LinalgError::Degenerate);
    }
    a.check_finite()?;
    if a.rows() < a.cols() {
        let t = svd_tall(&a.transpose());
        return Ok(SvdResult {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        });
    }
    Ok(svd_tall(a))
}

/// Requires rows >= cols.
fn svd_tall(a: &Matrix) -> SvdResult {
    let m = a.rows();
    let n = a.cols();
    // Columns of `a` stored contiguously so rotations touch contiguous memory.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let eps = f64::EPSILON;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = {
                    let cp = &cols[p];
                    let cq = &cols[q];
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for i in 0..m {
                        alpha += cp[i] * cp[i];
                        beta += cq[i] * cq[i];
                        gamma += cp[i] * cq[i];
                    }
                    (alpha, beta, gamma)
                };
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut cols, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let sigma_max = order.first().map_or(0.0, |&i| norms[i]);
    let negligible = sigma_max * eps * (m.max(n) as f64);

    let mut sigma = Vec::with_capacity(n);
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut v_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for &j in &order {
        let s = norms[j];
        let u = if s > negligible && s > 0.0 {
            cols[j].iter().map(|x| x / s).collect()
        } else {
            vec![0.0; m]
        };
        sigma.push(if s > negligible { s } else { 0.0 });
        u_cols.push(u);
        v_cols.push(v[j].clone());
    }
    orthonormalize_with_completion(&mut u_cols, m);
    orthonormalize_with_completion(&mut v_cols, n);

    let mut u = Matrix::zeros(m, n);
    for (j, col) in u_cols.iter().enumerate() {
        for (r, &x) in col.iter().enumerate() {
            u.set(r, j, x);
        }
    }
    let mut vm = Matrix::zeros(n, n);
    for (j, col) in v_cols.iter().enumerate() {
        for (r, &x) in col.iter().enumerate() {
            vm.set(r, j, x);
        }
    }
    SvdResult { u, sigma, v: vm }
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let a = *x;
        let b = *y;
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Modified Gram–Schmidt over `cols` (in order). Columns that collapse to zero
/// are replaced by the first standard basis vector that is independent of the
/// columns already accepted.
fn orthonormalize_with_completion(cols: &mut [Vec<f64>], dim: usize) {
    let mut next_basis = 0usize;
    for j in 0..cols.len() {
        let mut candidate = cols[j].clone();
        project_out(&mut candidate, &cols[..j]);
        let mut norm = l2(&candidate);
        if norm < 0.5 {
            // Degenerate column (zero singular value): complete the basis.
            loop {
                assert!(next_basis < dim, "basis completion ran out of vectors");
                let mut e = vec![0.0; dim];
                e[next_basis] = 1.0;
                next_basis += 1;
                project_out(&mut e, &cols[..j]);
                // Second pass for numerical safety.
                project_out(&mut e, &cols[..j]);
                let n = l2(&e);
                if n > 1e-3 {
                    candidate = e;
                    norm = n;
                    break;
                }
            }
        }
        for x in candidate.iter_mut() {
            *x /= norm;
        }
        cols[j] = candidate;
    }
}

fn project_out(x: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let d: f64 = x.iter().zip(b).map(|(a, c)| a * c).sum();
        for (xi, bi) in x.iter_mut().zip(b) {
            *xi -= d * bi;
        }
    }
}

fn l2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// How the truncation cutoff is derived from `tau`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// cutoff = tau · σ₁
    #[default]
    Relative,
    /// cutoff = tau
    Absolute,
}

/// Keeps the singular triples with `σ_j > cutoff` and rebuilds the matrix.
/// Returns the truncated matrix and the number of retained triples.
pub fn lowrank_truncate(s: &SvdResult, mode: ThresholdMode, tau: f64) -> (Matrix, usize) {
    let retained = retained_rank(&s.sigma, mode, tau);
    (s.reconstruct_top(retained), retained)
}

/// Number of singular values strictly above the cutoff. `sigma` must be
/// sorted in descending order.
pub fn retained_rank(sigma: &[f64], mode: ThresholdMode, tau: f64) -> usize {
    let cutoff = match mode {
        ThresholdMode::Relative => tau * sigma.first().copied().unwrap_or(0.0),
        ThresholdMode::Absolute => tau,
    };
    sigma.iter().take_while(|&&s| s > cutoff).count()
}

/// Truncation of a matrix in one call. Vectors (`min(rows, cols) == 1`) and
/// all-zero matrices are returned unchanged with their natural rank.
pub fn truncate_matrix(a: &Matrix, mode: ThresholdMode, tau: f64) -> Result<(Matrix, usize)> {
    a.check_finite()?;
    if a.rows().min(a.cols()) <= 1 {
        let rank = usize::from(!a.is_zero());
        return Ok((a.clone(), rank));
    }
    if a.is_zero() {
        return Ok((a.clone(), 0));
    }
    let s = svd(a)?;
    Ok(lowrank_truncate(&s, mode, tau))
}

/// Elementwise `Σ weight · m`.
pub fn weighted_sum<'a, I>(terms: I) -> Result<Matrix>
where
    I: IntoIterator<Item = (f64, &'a Matrix)>,
{
    let mut iter = terms.into_iter();
    let (w0, m0) = iter.next().ok_or(LinalgError::Empty)?;
    let mut acc = m0.scale(w0);
    for (w, m) in iter {
        acc.axpy(w, m)?;
    }
    Ok(acc)
}
