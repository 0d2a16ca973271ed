// SPDX-License-Identifier: Apache-2.0

//! Dense 4th-order weight tensors, matricization, and truncated SVD.
//!
//! Tensors use the layout `(c, kh, kw, f)` in row-major order with the output
//! feature index fastest, so a tensor and any matricization whose row modes
//! form a prefix of `(C, Kh, Kw, F)` share the same memory layout.

use alloc::vec;
use alloc::vec::Vec;

use crate::math::sqrt;
use crate::{Error, Result};

/// One axis of a [`Tensor4`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    C,
    Kh,
    Kw,
    F,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::C, Mode::Kh, Mode::Kw, Mode::F];

    #[inline]
    pub fn axis(self) -> usize {
        self as usize
    }
}

/// Weight tensor with dims `[C, Kh, Kw, F]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f64>,
}

fn checked_len(dims: &[usize]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(Error::DimensionOverflow)
}

impl Tensor4 {
    pub fn zeros(dims: [usize; 4]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::EmptyDimension(dims));
        }
        let len = checked_len(&dims)?;
        Ok(Self {
            dims,
            data: vec![0.0; len],
        })
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::EmptyDimension(dims));
        }
        let expected = checked_len(&dims)?;
        if data.len() != expected {
            return Err(Error::DataLength {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    /// Builds a tensor by evaluating `f(c, kh, kw, f)` at every index.
    pub fn from_fn(
        dims: [usize; 4],
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut t = Self::zeros(dims)?;
        let [c_n, kh_n, kw_n, f_n] = dims;
        let mut i = 0;
        for c in 0..c_n {
            for kh in 0..kh_n {
                for kw in 0..kw_n {
                    for o in 0..f_n {
                        t.data[i] = f(c, kh, kw, o);
                        i += 1;
                    }
                }
            }
        }
        Ok(t)
    }

    #[inline]
    pub fn dims(&self) -> [usize; 4] {
        self.dims
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, c: usize, kh: usize, kw: usize, f: usize) -> usize {
        let [_, kh_n, kw_n, f_n] = self.dims;
        ((c * kh_n + kh) * kw_n + kw) * f_n + f
    }

    #[inline]
    pub fn get(&self, c: usize, kh: usize, kw: usize, f: usize) -> f64 {
        self.data[self.offset(c, kh, kw, f)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, kh: usize, kw: usize, f: usize, value: f64) {
        let i = self.offset(c, kh, kw, f);
        self.data[i] = value;
    }

    pub fn frobenius_norm(&self) -> f64 {
        sqrt(self.data.iter().map(|v| v * v).sum())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        let expected = rows.checked_mul(cols).ok_or(Error::DimensionOverflow)?;
        if data.len() != expected {
            return Err(Error::DataLength {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
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
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(alloc::format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows,
                self.cols,
                other.rows,
                other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[r * other.cols..(r + 1) * other.cols];
                for (d, b) in dst.iter_mut().zip(row) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

fn validate_split(row_modes: &[Mode]) -> Result<()> {
    if row_modes.is_empty() || row_modes.len() >= 4 {
        return Err(Error::InvalidModeSplit);
    }
    for (i, m) in row_modes.iter().enumerate() {
        if row_modes[..i].contains(m) {
            return Err(Error::InvalidModeSplit);
        }
    }
    Ok(())
}

/// Mixed-radix strides of a tensor element into the (row, col) of a
/// matricization. Returns per-axis row strides and column strides.
fn split_strides(
    dims: [usize; 4],
    row_modes: &[Mode],
) -> Result<([usize; 4], [usize; 4], usize, usize)> {
    validate_split(row_modes)?;
    let col_modes: Vec<Mode> = Mode::ALL
        .iter()
        .copied()
        .filter(|m| !row_modes.contains(m))
        .collect();
    let mut row_stride = [0usize; 4];
    let mut col_stride = [0usize; 4];
    let mut rows = 1usize;
    for m in row_modes.iter().rev() {
        row_stride[m.axis()] = rows;
        rows = rows
            .checked_mul(dims[m.axis()])
            .ok_or(Error::DimensionOverflow)?;
    }
    let mut cols = 1usize;
    for m in col_modes.iter().rev() {
        col_stride[m.axis()] = cols;
        cols = cols
            .checked_mul(dims[m.axis()])
            .ok_or(Error::DimensionOverflow)?;
    }
    rows.checked_mul(cols).ok_or(Error::DimensionOverflow)?;
    Ok((row_stride, col_stride, rows, cols))
}

/// Unfolds `t` into a matrix whose rows enumerate `row_modes` (in the given
/// order, last listed fastest) and whose columns enumerate the remaining modes
/// in canonical order.
pub fn matricize(t: &Tensor4, row_modes: &[Mode]) -> Result<Matrix> {
    let (rs, cs, rows, cols) = split_strides(t.dims, row_modes)?;
    let mut m = Matrix::zeros(rows, cols);
    let [cn, khn, kwn, fnn] = t.dims;
    let mut i = 0;
    for c in 0..cn {
        for kh in 0..khn {
            for kw in 0..kwn {
                for f in 0..fnn {
                    let r = c * rs[0] + kh * rs[1] + kw * rs[2] + f * rs[3];
                    let col = c * cs[0] + kh * cs[1] + kw * cs[2] + f * cs[3];
                    m.data[r * cols + col] = t.data[i];
                    i += 1;
                }
            }
        }
    }
    Ok(m)
}

/// Inverse of [`matricize`].
pub fn dematricize(m: &Matrix, dims: [usize; 4], row_modes: &[Mode]) -> Result<Tensor4> {
    let (rs, cs, rows, cols) = split_strides(dims, row_modes)?;
    if m.rows != rows || m.cols != cols {
        return Err(Error::Shape(alloc::format!(
            "matrix is {}x{}, dims {:?} with row modes {:?} need {}x{}",
            m.rows,
            m.cols,
            dims,
            row_modes,
            rows,
            cols
        )));
    }
    let mut t = Tensor4::zeros(dims)?;
    let [cn, khn, kwn, fnn] = dims;
    let mut i = 0;
    for c in 0..cn {
        for kh in 0..khn {
            for kw in 0..kwn {
                for f in 0..fnn {
                    let r = c * rs[0] + kh * rs[1] + kw * rs[2] + f * rs[3];
                    let col = c * cs[0] + kh * cs[1] + kw * cs[2] + f * cs[3];
                    t.data[i] = m.data[r * cols + col];
                    i += 1;
                }
            }
        }
    }
    Ok(t)
}

/// Truncated singular value decomposition `m ≈ U · diag(s) · Vᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// rows × r, orthonormal columns.
    pub u: Matrix,
    /// Non-increasing.
    pub s: Vec<f64>,
    /// cols × r, orthonormal columns.
    pub v: Matrix,
    /// Sum of squared discarded singular values.
    pub tail_energy: f64,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// Keeps the leading `rank` components.
    pub fn truncate(&self, rank: usize) -> Result<SvdResult> {
        let max = self.s.len();
        if rank == 0 || rank > max {
            return Err(Error::RankOutOfRange { rank, max });
        }
        let keep_cols = |m: &Matrix| {
            let mut out = Matrix::zeros(m.rows, rank);
            for r in 0..m.rows {
                for c in 0..rank {
                    out.set(r, c, m.get(r, c));
                }
            }
            out
        };
        let extra: f64 = self.s[rank..].iter().map(|s| s * s).sum();
        Ok(SvdResult {
            u: keep_cols(&self.u),
            s: self.s[..rank].to_vec(),
            v: keep_cols(&self.v),
            tail_energy: self.tail_energy + extra,
        })
    }

    /// Squared Frobenius error of the rank-`r` truncation, for every `r` in
    /// `0..=rank()`.
    pub fn tail_energies(&self) -> Vec<f64> {
        let mut tails = vec![0.0; self.s.len() + 1];
        let mut acc = self.tail_energy;
        tails[self.s.len()] = acc;
        for r in (0..self.s.len()).rev() {
            acc += self.s[r] * self.s[r];
            tails[r] = acc;
        }
        tails
    }

    pub fn reconstruct(&self) -> Matrix {
        let mut out = Matrix::zeros(self.u.rows, self.v.rows);
        for k in 0..self.s.len() {
            let sk = self.s[k];
            for r in 0..self.u.rows {
                let a = self.u.get(r, k) * sk;
                if a == 0.0 {
                    continue;
                }
                for c in 0..self.v.rows {
                    out.data[r * self.v.rows + c] += a * self.v.get(c, k);
                }
            }
        }
        out
    }
}

pub const JACOBI_TOLERANCE: f64 = 1e-12;
pub const JACOBI_MAX_SWEEPS: usize = 100;

/// Best rank-`rank` approximation factors of `m`.
pub fn truncated_svd(m: &Matrix, rank: usize) -> Result<SvdResult> {
    let max = m.rows.min(m.cols);
    if rank == 0 || rank > max {
        return Err(Error::RankOutOfRange { rank, max });
    }
    full_svd(m)?.truncate(rank)
}

/// Thin SVD with `min(rows, cols)` components.
pub fn full_svd(m: &Matrix) -> Result<SvdResult> {
    if m.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    if m.rows == 0 || m.cols == 0 {
        return Err(Error::RankOutOfRange { rank: 0, max: 0 });
    }
    let (u, s, v) = if m.rows >= m.cols {
        jacobi_tall(m)?
    } else {
        let (u, s, v) = jacobi_tall(&m.transpose())?;
        (v, s, u)
    };
    let mut out = SvdResult {
        u,
        s,
        v,
        tail_energy: 0.0,
    };
    fix_signs(&mut out);
    Ok(out)
}

/// One-sided (Hestenes) Jacobi for a matrix with rows >= cols.
fn jacobi_tall(a: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let rows = a.rows;
    let n = a.cols;
    // Column-major working copies so column rotations touch contiguous memory.
    let mut w: Vec<Vec<f64>> = (0..n)
        .map(|c| (0..rows).map(|r| a.get(r, c)).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            let mut col = vec![0.0; n];
            col[c] = 1.0;
            col
        })
        .collect();

    // Columns this small carry only rounding noise; rotating them never settles.
    let negligible = a.frobenius_sq() * 1e-30;
    let mut converged = n < 2;
    let mut residual = 0.0f64;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if converged {
            break;
        }
        residual = 0.0;
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (wp, wq) = (&w[p], &w[q]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for (x, y) in wp.iter().zip(wq) {
                        alpha += x * x;
                        beta += y * y;
                        gamma += x * y;
                    }
                    (alpha, beta, gamma)
                };
                let scale = sqrt(alpha) * sqrt(beta);
                if alpha <= negligible || beta <= negligible || gamma == 0.0 {
                    continue;
                }
                let cosine = gamma.abs() / scale;
                residual = residual.max(cosine);
                if cosine <= JACOBI_TOLERANCE {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + sqrt(1.0 + zeta * zeta));
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / sqrt(1.0 + t * t);
                let s = c * t;
                rotate(&mut w, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            sweeps: JACOBI_MAX_SWEEPS,
            residual,
        });
    }

    let norms: Vec<f64> = w
        .iter()
        .map(|col| sqrt(col.iter().map(|x| x * x).sum()))
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps ties in column order.
    order.sort_by(|&i, &j| {
        norms[j]
            .partial_cmp(&norms[i])
            .unwrap_or(core::cmp::Ordering::Equal)
    });

    let largest = norms.iter().cloned().fold(0.0, f64::max);
    // Columns skipped as negligible were never orthogonalized, so they must
    // count as zero too.
    let zero_threshold = (largest * (rows.max(n) as f64) * f64::EPSILON).max(sqrt(negligible));

    let mut u = Matrix::zeros(rows, n);
    let mut vm = Matrix::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        if sigma > zero_threshold && sigma > 0.0 {
            s.push(sigma);
            for r in 0..rows {
                u.set(r, k, w[j][r] / sigma);
            }
        } else {
            s.push(0.0);
            missing.push(k);
        }
        for r in 0..n {
            vm.set(r, k, v[j][r]);
        }
    }
    complete_orthonormal(&mut u, &missing);
    Ok((u, s, vm))
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills the listed columns of `u` with unit vectors orthogonal to all other
/// columns: for each, the standard basis vector with the largest component
/// outside the filled span, orthogonalized twice (Gram-Schmidt).
fn complete_orthonormal(u: &mut Matrix, missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let rows = u.rows;
    let mut filled: Vec<usize> = (0..u.cols).filter(|c| !missing.contains(c)).collect();
    let residual = |u: &Matrix, filled: &[usize], candidate: usize| {
        let mut e = vec![0.0; rows];
        e[candidate] = 1.0;
        for _ in 0..2 {
            for &j in filled {
                let dot: f64 = (0..rows).map(|r| u.get(r, j) * e[r]).sum();
                for (r, x) in e.iter_mut().enumerate() {
                    *x -= dot * u.get(r, j);
                }
            }
        }
        let norm = sqrt(e.iter().map(|x| x * x).sum());
        (norm, e)
    };
    for &k in missing {
        // The complement has dimension >= 1, so some basis vector keeps a
        // squared residual of at least 1/rows.
        let (norm, e) =
            (0..rows)
                .map(|c| residual(u, &filled, c))
                .fold((-1.0, Vec::new()), |best, cand| {
                    if cand.0 > best.0 {
                        cand
                    } else {
                        best
                    }
                });
        for (r, x) in e.iter().enumerate() {
            u.set(r, k, x / norm);
        }
        filled.push(k);
    }
}

/// Flips each component so the largest-magnitude entry of its U column is
/// positive (lowest row index on ties).
fn fix_signs(svd: &mut SvdResult) {
    for k in 0..svd.s.len() {
        let mut best = 0;
        let mut best_abs = -1.0;
        for r in 0..svd.u.rows {
            let a = svd.u.get(r, k).abs();
            if a > best_abs {
                best_abs = a;
                best = r;
            }
        }
        if svd.u.get(best, k) < 0.0 {
            for r in 0..svd.u.rows {
                let x = svd.u.get(r, k);
                svd.u.set(r, k, -x);
            }
            for r in 0..svd.v.rows {
                let x = svd.v.get(r, k);
                svd.v.set(r, k, -x);
            }
        }
    }
}

/// `‖a − b‖_F / ‖a‖_F`.
pub fn rel_frobenius_error(a: &Tensor4, b: &Tensor4) -> Result<f64> {
    if a.dims != b.dims {
        return Err(Error::Shape(alloc::format!(
            "reference dims {:?} vs {:?}",
            a.dims,
            b.dims
        )));
    }
    let reference = a.frobenius_norm();
    if reference == 0.0 {
        return Err(Error::ZeroReference);
    }
    let diff: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sqrt(diff) / reference)
}
