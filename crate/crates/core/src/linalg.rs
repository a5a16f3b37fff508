//! Dense real linear algebra: symmetric eigendecomposition, spectral norm,
//! eigenspace projections and Frobenius inner products.
//!
//! Everything runs in double precision with plain sequential accumulation so
//! that results are bit-reproducible for identical inputs.

use std::io::Write;
use std::path::Path;

use ndarray::{ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sweep budget for the cyclic Jacobi eigensolver.
pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Off-diagonal Frobenius threshold, relative to the input's Frobenius norm.
pub const JACOBI_REL_TOL: f64 = 1e-12;
/// Relative change of the Rayleigh quotient at which power iteration stops.
pub const POWER_REL_TOL: f64 = 1e-10;
pub const POWER_MAX_ITERS: usize = 10_000;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
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

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::contract(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::contract("ragged rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    /// `v vᵀ`.
    pub fn outer(v: &[f64]) -> Self {
        let n = v.len();
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                m.data[i * n + j] = v[i] * v[j];
            }
        }
        m
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.rows, self.cols), &self.data).expect("shape matches data")
    }

    pub fn view_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        ArrayViewMut2::from_shape((self.rows, self.cols), &mut self.data)
            .expect("shape matches data")
    }

    /// New matrix made of the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols, "matvec dimension");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::contract(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let product = self.view().dot(&other.view());
        Ok(Self::from_array(product))
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| c * x).collect(),
        }
    }

    pub fn add(&self, other: &DenseMatrix) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::contract("shape mismatch in add"));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<Self> {
        self.add(&other.scale(-1.0))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `‖A − Aᵀ‖_F ≤ rel_tol · ‖A‖_F`.
    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        if !self.is_square() {
            return false;
        }
        let mut diff = 0.0;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let d = self.get(i, j) - self.get(j, i);
                diff += 2.0 * d * d;
            }
        }
        diff.sqrt() <= rel_tol * self.frobenius_norm()
    }

    /// Copies the upper triangle onto the lower one.
    pub fn mirror_upper(&mut self) {
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let v = self.get(i, j);
                self.set(j, i, v);
            }
        }
    }

    pub(crate) fn from_array(a: ndarray::Array2<f64>) -> Self {
        let (rows, cols) = a.dim();
        let data = if a.is_standard_layout() {
            a.into_raw_vec_and_offset().0
        } else {
            a.iter().copied().collect()
        };
        Self { rows, cols, data }
    }

    /// Plain CSV without header, full round-trip precision.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::with_capacity(self.data.len() * 24);
        for i in 0..self.rows {
            let line: Vec<String> = self.row(i).iter().map(|x| format!("{x:?}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }

    /// Reads a headerless numeric CSV written by [`DenseMatrix::write_csv`].
    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno as u64 + 1,
                    message: e.to_string(),
                })?;
            rows.push(row);
        }
        Self::from_rows(&rows).map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: "rows have different lengths".into(),
        })
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Eigenvalues sorted descending with matching orthonormal eigenvectors.
#[derive(Debug, Clone)]
pub struct EigenBasis {
    pub values: Vec<f64>,
    /// Column `i` is the unit eigenvector for `values[i]`.
    pub vectors: DenseMatrix,
}

impl EigenBasis {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn eigenvector(&self, i: usize) -> Vec<f64> {
        self.vectors.column(i)
    }

    /// Coefficients `uᵢ·r` for every eigenvector.
    pub fn coefficients(&self, r: &[f64]) -> Vec<f64> {
        let n = self.len();
        let mut c = vec![0.0; n];
        for (k, &rk) in r.iter().enumerate() {
            for (ci, uk) in c.iter_mut().zip(self.vectors.row(k)) {
                *ci += rk * uk;
            }
        }
        c
    }

    /// `Σ λᵢ uᵢ uᵢᵀ`.
    pub fn reconstruct(&self) -> DenseMatrix {
        let n = self.len();
        let mut m = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let ui = self.vectors.row(i);
                let uj = self.vectors.row(j);
                let v: f64 = (0..n).map(|k| self.values[k] * ui[k] * uj[k]).sum();
                m.set(i, j, v);
            }
        }
        m.mirror_upper();
        m
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Rotations sweep the strict upper triangle row by row; the iteration stops
/// once the off-diagonal Frobenius norm falls to `1e-12·‖m‖_F`. Eigenvalues come
/// back sorted descending, ties kept in rotation order (stable sort).
pub fn sym_eigen(m: &DenseMatrix) -> Result<EigenBasis> {
    if !m.is_square() {
        return Err(Error::contract(format!(
            "sym_eigen needs a square matrix, got {}x{}",
            m.rows, m.cols
        )));
    }
    if !m.is_finite() {
        return Err(Error::contract("sym_eigen input has non-finite entries"));
    }
    if !m.is_symmetric(1e-10) {
        return Err(Error::contract("sym_eigen input is not symmetric"));
    }
    let n = m.rows;
    let mut a = m.clone();
    // Remove the sub-tolerance asymmetry so the rotations see an exactly
    // symmetric matrix.
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (a.get(i, j) + a.get(j, i));
            a.set(i, j, avg);
            a.set(j, i, avg);
        }
    }
    let mut v = DenseMatrix::identity(n);
    let threshold = JACOBI_REL_TOL * a.frobenius_norm();

    let off_norm = |a: &DenseMatrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += 2.0 * a.get(i, j) * a.get(i, j);
            }
        }
        s.sqrt()
    };

    let mut converged = false;
    let mut off = off_norm(&a);
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        if off <= threshold {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut a, p, q, c, s);
                a.set(p, p, app - t * apq);
                a.set(q, q, aqq + t * apq);
                a.set(p, q, 0.0);
                a.set(q, p, 0.0);
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
        off = off_norm(&a);
    }
    if !converged && off > threshold {
        return Err(Error::Numerical {
            message: format!("Jacobi eigensolver did not converge in {JACOBI_MAX_SWEEPS} sweeps"),
            residual: off,
        });
    }

    let diag: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diag[j].total_cmp(&diag[i]));
    let values = order.iter().map(|&i| diag[i]).collect();
    let mut vectors = DenseMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors.set(k, dst, v.get(k, src));
        }
    }
    Ok(EigenBasis { values, vectors })
}

/// Applies the two-sided plane rotation to rows/columns `p`, `q` of `a`,
/// skipping the 2×2 pivot block which the caller sets directly.
fn rotate(a: &mut DenseMatrix, p: usize, q: usize, c: f64, s: f64) {
    let n = a.rows;
    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = a.get(k, p);
        let akq = a.get(k, q);
        let new_p = c * akp - s * akq;
        let new_q = s * akp + c * akq;
        a.set(k, p, new_p);
        a.set(p, k, new_p);
        a.set(k, q, new_q);
        a.set(q, k, new_q);
    }
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
///
/// Starts from the normalized row-sum vector (falling back to the first
/// coordinate vector with a nonzero image), stops when the Rayleigh quotient
/// changes by at most `1e-10` relative. A zero matrix gives 0.
pub fn spectral_norm(m: &DenseMatrix) -> f64 {
    assert!(m.is_square(), "spectral_norm needs a square matrix");
    let n = m.rows;
    if n == 0 {
        return 0.0;
    }
    let mut v: Vec<f64> = (0..n).map(|i| m.row(i).iter().sum()).collect();
    if !normalize(&mut v) {
        let Some(i) = (0..n).find(|&i| m.row(i).iter().any(|&x| x != 0.0)) else {
            return 0.0;
        };
        v = vec![0.0; n];
        v[i] = 1.0;
    }
    let mut previous = f64::NAN;
    let mut lambda = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        let mut w = m.matvec(&v);
        lambda = dot(&v, &w);
        let residual = w.iter().zip(&v).map(|(wi, vi)| (wi - lambda * vi).powi(2)).sum::<f64>().sqrt();
        if !normalize(&mut w) {
            return 0.0;
        }
        v = w;
        // The Rayleigh quotient error is about residual²/gap, so a small residual
        // is decisive. The stall test covers near-degenerate top eigenvalues.
        if residual <= POWER_REL_TOL * lambda.abs() || (lambda - previous).abs() <= 1e-15 * lambda.abs() {
            break;
        }
        previous = lambda;
    }
    lambda.max(0.0)
}

fn normalize(v: &mut [f64]) -> bool {
    let norm = norm2(v);
    if norm == 0.0 || !norm.is_finite() {
        return false;
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    true
}

/// Splits `r` into its projection on the top-`s` eigenvectors and the rest.
pub fn project_split(r: &[f64], basis: &EigenBasis, s: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = basis.len();
    if r.len() != n {
        return Err(Error::contract(format!(
            "residual has length {}, basis has dimension {n}",
            r.len()
        )));
    }
    if s < 1 || s >= n {
        return Err(Error::contract(format!("need 1 <= s < n, got s={s}, n={n}")));
    }
    let coeffs = basis.coefficients(r);
    let mut top = vec![0.0; n];
    let mut rest = vec![0.0; n];
    for k in 0..n {
        let u = basis.vectors.row(k);
        let mut t = 0.0;
        for i in 0..s {
            t += coeffs[i] * u[i];
        }
        let mut b = 0.0;
        for i in s..n {
            b += coeffs[i] * u[i];
        }
        top[k] = t;
        rest[k] = b;
    }
    Ok((top, rest))
}

/// `Σᵢⱼ aᵢⱼ bᵢⱼ`.
pub fn frobenius_inner(a: &DenseMatrix, b: &DenseMatrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!(
            "frobenius_inner shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(dot(&a.data, &b.data))
}
