//! Dense linear-algebra kernels shared by every module.
//!
//! Matrices are row-major `f64`, immutable once built, and desk-scale
//! (nothing here is tuned past a few hundred rows). SVD and eigenvalue
//! extraction are delegated to nalgebra; eigenvectors come from inverse
//! iteration so that (numerically) defective inputs surface as an
//! ill-conditioned eigenvector matrix instead of a wrong answer.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major real matrix. All entries finite by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix", into = "RawMatrix")]
pub struct RealMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for RealMatrix {
    type Error = Error;
    fn try_from(raw: RawMatrix) -> Result<Self> {
        RealMatrix::new(raw.rows, raw.cols, raw.data)
    }
}

impl From<RealMatrix> for RawMatrix {
    fn from(m: RealMatrix) -> Self {
        RawMatrix { rows: m.rows, cols: m.cols, data: m.data }
    }
}

impl RealMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::ShapeError(format!("zero dimension: {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::ShapeError(format!(
                "entries length {} != {rows}x{cols}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite matrix entry".into()));
        }
        Ok(RealMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        RealMatrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        RealMatrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows[0].len();
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Self::from_fn(r, c, |i, j| rows[i][j])
    }

    /// Column vector from a slice.
    pub fn column(v: &[f64]) -> Self {
        Self::from_fn(v.len(), 1, |i, _| v[i])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn set_col(&mut self, j: usize, v: &[f64]) {
        assert_eq!(v.len(), self.rows);
        for i in 0..self.rows {
            self.set(i, j, v[i]);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn transpose(&self) -> RealMatrix {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &RealMatrix) -> RealMatrix {
        assert_eq!(
            self.cols, other.rows,
            "matmul shape mismatch: {}x{} * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = RealMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let arow = self.row(i);
            let orow = i * other.cols;
            for (k, &aik) in arow.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let brow = other.row(k);
                let dst = &mut out.data[orow..orow + other.cols];
                for (d, &b) in dst.iter_mut().zip(brow.iter()) {
                    *d += aik * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec shape mismatch");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn add(&self, other: &RealMatrix) -> RealMatrix {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &RealMatrix) -> RealMatrix {
        self.zip(other, |a, b| a - b)
    }

    pub fn scaled(&self, s: f64) -> RealMatrix {
        RealMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    fn zip(&self, other: &RealMatrix, f: impl Fn(f64, f64) -> f64) -> RealMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "elementwise shape mismatch");
        RealMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Frobenius inner product <self, other>.
    pub fn frobenius_dot(&self, other: &RealMatrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "dot shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// Row-major vec(M) as a flat slice (the storage order itself).
    pub fn vec_row_major(&self) -> &[f64] {
        &self.data
    }

    fn to_na(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

/// Thin SVD: `u` (rows x k), `s` descending (k = min(rows, cols)), `vt` (k x cols).
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: RealMatrix,
    pub s: Vec<f64>,
    pub vt: RealMatrix,
}

pub fn svd(m: &RealMatrix) -> Result<Svd> {
    if !m.is_finite() {
        return Err(Error::InvalidInput("svd: non-finite input".into()));
    }
    let na = m.to_na();
    let decomp = na
        .try_svd(true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::NumericalFailure("svd did not converge".into()))?;
    let u = decomp.u.expect("u requested");
    let vt = decomp.v_t.expect("v_t requested");
    let s: Vec<f64> = decomp.singular_values.iter().copied().collect();

    // nalgebra sorts descending already; enforce it anyway so downstream
    // rank logic never depends on backend behavior.
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let s_sorted: Vec<f64> = order.iter().map(|&i| s[i]).collect();
    let u_sorted = RealMatrix::from_fn(u.nrows(), order.len(), |i, j| u[(i, order[j])]);
    let vt_sorted = RealMatrix::from_fn(order.len(), vt.ncols(), |i, j| vt[(order[i], j)]);
    Ok(Svd { u: u_sorted, s: s_sorted, vt: vt_sorted })
}

/// Largest singular value.
pub fn spectral_norm(m: &RealMatrix) -> Result<f64> {
    Ok(svd(m)?.s.first().copied().unwrap_or(0.0))
}

/// Minimum-norm least-squares solution of `a x = b` via SVD pseudoinverse.
/// Singular values below `1e-12 * s_max` are treated as zero.
pub fn lstsq(a: &RealMatrix, b: &RealMatrix) -> Result<RealMatrix> {
    if a.rows() != b.rows() {
        return Err(Error::ShapeError(format!(
            "lstsq: lhs has {} rows, rhs has {}",
            a.rows(),
            b.rows()
        )));
    }
    let dec = svd(a)?;
    let smax = dec.s.first().copied().unwrap_or(0.0);
    let cutoff = 1e-12 * smax;
    // x = V S^+ U^T b
    let utb = dec.u.transpose().matmul(b);
    let mut scaled = utb;
    for i in 0..dec.s.len() {
        let inv = if dec.s[i] > cutoff { 1.0 / dec.s[i] } else { 0.0 };
        for j in 0..scaled.cols() {
            let v = scaled.get(i, j) * inv;
            scaled.set(i, j, v);
        }
    }
    Ok(dec.vt.transpose().matmul(&scaled))
}

/// Inverse via Gauss-Jordan with partial pivoting; `None` when a pivot
/// falls below `1e-12 * max_abs`.
pub fn invert(a: &RealMatrix) -> Option<RealMatrix> {
    assert!(a.is_square(), "invert: non-square input");
    let n = a.rows();
    let tiny = 1e-12 * a.max_abs().max(1.0);
    let mut work = a.clone();
    let mut inv = RealMatrix::identity(n);
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&r1, &r2| work.get(r1, col).abs().total_cmp(&work.get(r2, col).abs()))?;
        if work.get(pivot_row, col).abs() < tiny {
            return None;
        }
        if pivot_row != col {
            for j in 0..n {
                let (a1, a2) = (work.get(col, j), work.get(pivot_row, j));
                work.set(col, j, a2);
                work.set(pivot_row, j, a1);
                let (b1, b2) = (inv.get(col, j), inv.get(pivot_row, j));
                inv.set(col, j, b2);
                inv.set(pivot_row, j, b1);
            }
        }
        let p = work.get(col, col);
        for j in 0..n {
            work.set(col, j, work.get(col, j) / p);
            inv.set(col, j, inv.get(col, j) / p);
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let factor = work.get(r, col);
            if factor == 0.0 {
                continue;
            }
            for j in 0..n {
                work.set(r, j, work.get(r, j) - factor * work.get(col, j));
                inv.set(r, j, inv.get(r, j) - factor * inv.get(col, j));
            }
        }
    }
    Some(inv)
}

// ── Complex spectrum ──────────────────────────────────────────────────────────

/// Dense row-major complex matrix (eigenvector storage only).
#[derive(Debug, Clone)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl ComplexMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        ComplexMatrix { rows, cols, data: vec![Complex64::new(0.0, 0.0); rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: Complex64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn col(&self, j: usize) -> Vec<Complex64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }
}

/// Eigenvalues (conjugate pairs adjacent, positive imaginary part first),
/// right eigenvectors as columns, and the 2-norm condition number of the
/// eigenvector matrix. A condition above ~1e8 marks the matrix as
/// numerically defective.
#[derive(Debug, Clone)]
pub struct ComplexSpectrum {
    pub eigenvalues: Vec<Complex64>,
    pub right_eigenvectors: ComplexMatrix,
    pub eigvec_condition: f64,
}

/// Threshold on `eigvec_condition` above which a matrix is treated as
/// defective.
pub const DEFECT_CONDITION_THRESHOLD: f64 = 1e8;

pub fn eig_complex(m: &RealMatrix) -> Result<ComplexSpectrum> {
    if !m.is_square() {
        return Err(Error::ShapeError(format!("eig: non-square {}x{}", m.rows(), m.cols())));
    }
    if !m.is_finite() {
        return Err(Error::InvalidInput("eig: non-finite input".into()));
    }
    let n = m.rows();
    let scale = m.frobenius_norm().max(1.0);

    let na = m.to_na();
    let mut eigenvalues: Vec<Complex64> =
        na.complex_eigenvalues().iter().map(|c| Complex64::new(c.re, c.im)).collect();
    // Conjugate pairs adjacent, +im first; real eigenvalues sort among
    // themselves by value.
    eigenvalues.sort_by(|a, b| {
        a.re.total_cmp(&b.re)
            .then(a.im.abs().total_cmp(&b.im.abs()))
            .then(b.im.total_cmp(&a.im))
    });

    let mut vectors = ComplexMatrix::zeros(n, n);
    let cluster_tol = 1e-8 * scale;
    let mut start_rng = crate::rng::SeedRng::new(0x5eed_e16e);
    for l in 0..n {
        let lambda = eigenvalues[l];
        let cluster: Vec<Vec<Complex64>> = (0..l)
            .filter(|&p| (eigenvalues[p] - lambda).norm() <= cluster_tol)
            .map(|p| vectors.col(p))
            .collect();
        let v = inverse_iteration(m, lambda, &cluster, scale, &mut start_rng)?;
        for (i, value) in v.iter().enumerate() {
            vectors.set(i, l, *value);
        }
    }

    // Residual sanity: gross failures abort; the fine 1e-8 tolerance is a
    // property of diagonalizable inputs and checked in tests.
    for l in 0..n {
        let v = vectors.col(l);
        let r = eig_residual(m, eigenvalues[l], &v);
        if r > 1e-6 * scale {
            return Err(Error::NumericalFailure(format!(
                "eigenpair {l} residual {r:.3e} exceeds 1e-6 * scale"
            )));
        }
    }

    let eigvec_condition = complex_condition(&vectors)?;
    Ok(ComplexSpectrum { eigenvalues, right_eigenvectors: vectors, eigvec_condition })
}

fn eig_residual(m: &RealMatrix, lambda: Complex64, v: &[Complex64]) -> f64 {
    let n = m.rows();
    let mut acc = 0.0;
    for i in 0..n {
        let mut av = Complex64::new(0.0, 0.0);
        for (j, vj) in v.iter().enumerate() {
            av += m.get(i, j) * vj;
        }
        acc += (av - lambda * v[i]).norm_sqr();
    }
    acc.sqrt()
}

fn inverse_iteration(
    m: &RealMatrix,
    lambda: Complex64,
    cluster: &[Vec<Complex64>],
    scale: f64,
    start_rng: &mut crate::rng::SeedRng,
) -> Result<Vec<Complex64>> {
    let n = m.rows();
    // Deterministic start, orthogonalized against eigenvectors already found
    // for the same (numerically repeated) eigenvalue so repeated but
    // non-defective eigenvalues still yield an independent basis.
    let mut b = loop {
        let mut b: Vec<Complex64> =
            (0..n).map(|_| Complex64::new(start_rng.normal(), start_rng.normal())).collect();
        orthogonalize(&mut b, cluster);
        let norm = vec_norm(&b);
        if norm > 1e-8 {
            normalize(&mut b);
            break b;
        }
    };

    let mut best: Option<(f64, Vec<Complex64>)> = None;
    for _ in 0..12 {
        let mut z = solve_shifted(m, lambda, &b, scale);
        let norm = vec_norm(&z);
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::NumericalFailure("inverse iteration produced zero vector".into()));
        }
        for zi in z.iter_mut() {
            *zi /= norm;
        }
        b = z;
        let r = eig_residual(m, lambda, &b);
        if best.as_ref().map_or(true, |(br, _)| r < *br) {
            best = Some((r, b.clone()));
        }
        if r <= 1e-12 * scale {
            break;
        }
    }
    let (_, mut v) = best.expect("at least one iteration ran");
    fix_phase(&mut v);
    Ok(v)
}

/// Solve (M - lambda I) z = b with complex partial-pivot LU. Exact-zero
/// pivots (M - lambda I singular to machine precision) are replaced by a
/// tiny value: inverse iteration wants the near-null direction, and the
/// huge amplification is normalized away by the caller.
fn solve_shifted(m: &RealMatrix, lambda: Complex64, b: &[Complex64], scale: f64) -> Vec<Complex64> {
    let n = m.rows();
    let tiny = Complex64::new(1e-300f64.max(f64::EPSILON * scale * 1e-4), 0.0);
    let mut a: Vec<Complex64> = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let mut v = Complex64::new(m.get(i, j), 0.0);
            if i == j {
                v -= lambda;
            }
            a.push(v);
        }
    }
    let mut x: Vec<Complex64> = b.to_vec();
    let mut perm: Vec<usize> = (0..n).collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&r1, &r2| {
                a[perm[r1] * n + col].norm().total_cmp(&a[perm[r2] * n + col].norm())
            })
            .unwrap();
        perm.swap(col, pivot);
        let mut p = a[perm[col] * n + col];
        if p.norm() < tiny.norm() {
            p = tiny;
            a[perm[col] * n + col] = p;
        }
        for r in (col + 1)..n {
            let factor = a[perm[r] * n + col] / p;
            if factor.norm() == 0.0 {
                continue;
            }
            a[perm[r] * n + col] = factor;
            for j in (col + 1)..n {
                let upd = a[perm[col] * n + j];
                a[perm[r] * n + j] -= factor * upd;
            }
            // store factor in place; apply to rhs during forward pass below
        }
    }
    // forward substitution on permuted rhs
    let mut y: Vec<Complex64> = (0..n).map(|r| x[perm[r]]).collect();
    for col in 0..n {
        for r in (col + 1)..n {
            let factor = a[perm[r] * n + col];
            let ycol = y[col];
            y[r] -= factor * ycol;
        }
    }
    // back substitution
    for col in (0..n).rev() {
        let mut acc = y[col];
        for j in (col + 1)..n {
            acc -= a[perm[col] * n + j] * x[j];
        }
        x[col] = acc / a[perm[col] * n + col];
    }
    x
}

fn orthogonalize(v: &mut [Complex64], basis: &[Vec<Complex64>]) {
    for _ in 0..2 {
        for u in basis {
            let dot: Complex64 = u.iter().zip(v.iter()).map(|(a, b)| a.conj() * b).sum();
            for (vi, ui) in v.iter_mut().zip(u.iter()) {
                *vi -= dot * ui;
            }
        }
    }
}

fn vec_norm(v: &[Complex64]) -> f64 {
    v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

fn normalize(v: &mut [Complex64]) {
    let n = vec_norm(v);
    for c in v.iter_mut() {
        *c /= n;
    }
}

fn fix_phase(v: &mut [Complex64]) {
    let (idx, _) = v
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| a.norm().total_cmp(&b.norm()))
        .expect("nonempty");
    let pivot = v[idx];
    if pivot.norm() == 0.0 {
        return;
    }
    let phase = pivot.conj() / pivot.norm();
    for c in v.iter_mut() {
        *c *= phase;
    }
}

/// 2-norm condition number of a complex matrix via the singular values of
/// its real 2n x 2n embedding [[Re, -Im], [Im, Re]].
fn complex_condition(v: &ComplexMatrix) -> Result<f64> {
    let n = v.rows();
    let emb = RealMatrix::from_fn(2 * n, 2 * n, |i, j| {
        let (bi, bj) = (i / n, j / n);
        let c = v.get(i % n, j % n);
        match (bi, bj) {
            (0, 0) | (1, 1) => c.re,
            (0, 1) => -c.im,
            _ => c.im,
        }
    });
    let s = svd(&emb)?.s;
    let smax = s.first().copied().unwrap_or(0.0);
    let smin = s.last().copied().unwrap_or(0.0);
    if smin <= smax * f64::EPSILON * 1e-2 || smin == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(smax / smin)
}
