//! Dense row-major `f64` matrices and the handful of kernels the rest of the
//! crate is built on: products, Gram matrices, column normalization, a
//! one-sided Jacobi SVD, Kronecker products and ranked selection.
//!
//! Every routine is single-threaded with a fixed reduction order, so results
//! are bit-reproducible.

use std::cell::Cell;
use std::fmt;
use std::ops::{Index, IndexMut};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Columns whose ℓ₂ norm is at or below this are treated as zero.
pub const ZERO_COLUMN_TOL: f64 = 1e-12;

/// Largest entry count `kron` will materialize.
pub const KRON_ENTRY_LIMIT: usize = 1_000_000;

const SVD_MAX_SWEEPS: usize = 80;

thread_local! {
    static LIVE_BYTES: Cell<usize> = const { Cell::new(0) };
    static PEAK_BYTES: Cell<usize> = const { Cell::new(0) };
}

/// Per-thread accounting of bytes held by live [`Matrix`] buffers.
pub mod alloc_stats {
    use super::{LIVE_BYTES, PEAK_BYTES};

    /// Resets the peak to the current live size.
    pub fn reset_peak() {
        let live = LIVE_BYTES.with(|c| c.get());
        PEAK_BYTES.with(|p| p.set(live));
    }

    pub fn peak_bytes() -> usize {
        PEAK_BYTES.with(|p| p.get())
    }

    pub fn live_bytes() -> usize {
        LIVE_BYTES.with(|c| c.get())
    }

    pub(super) fn grow(bytes: usize) {
        let live = LIVE_BYTES.with(|c| {
            let v = c.get() + bytes;
            c.set(v);
            v
        });
        PEAK_BYTES.with(|p| {
            if live > p.get() {
                p.set(live);
            }
        });
    }

    pub(super) fn shrink(bytes: usize) {
        LIVE_BYTES.with(|c| c.set(c.get().saturating_sub(bytes)));
    }
}

/// Dense row-major matrix of 64-bit floats with positive dimensions.
#[derive(PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Drop for Matrix {
    fn drop(&mut self) {
        alloc_stats::shrink(self.data.len() * std::mem::size_of::<f64>());
    }
}

impl Clone for Matrix {
    fn clone(&self) -> Self {
        Matrix::wrap(self.rows, self.cols, self.data.clone())
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl Matrix {
    fn wrap(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        alloc_stats::grow(data.len() * std::mem::size_of::<f64>());
        Matrix { rows, cols, data }
    }

    /// Zero matrix. Panics on a zero dimension.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Matrix::wrap(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Matrix::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Builds a matrix from a row-major buffer, rejecting bad lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyShape { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(Error::BufferLength { rows, cols, len: data.len() });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "from_vec" });
        }
        Ok(Matrix::wrap(rows, cols, data))
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        Matrix::from_vec(r, c, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    /// Column vector (n×1).
    pub fn column_vector(values: &[f64]) -> Result<Self> {
        Matrix::from_vec(values.len(), 1, values.to_vec())
    }

    /// Entries drawn i.i.d. from the standard normal distribution.
    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for v in m.data.iter_mut() {
            *v = rng.sample(StandardNormal);
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(mut self) -> Vec<f64> {
        alloc_stats::shrink(self.data.len() * std::mem::size_of::<f64>());
        std::mem::take(&mut self.data)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[f64]) {
        assert_eq!(values.len(), self.rows);
        for (i, &v) in values.iter().enumerate() {
            self[(i, j)] = v;
        }
    }

    /// Gathers the listed columns, in order, into a new matrix.
    pub fn select_columns(&self, indices: &[usize]) -> Result<Matrix> {
        if indices.is_empty() {
            return Err(Error::EmptyShape { rows: self.rows, cols: 0 });
        }
        if let Some(&bad) = indices.iter().find(|&&j| j >= self.cols) {
            return Err(Error::IndexOutOfRange { index: bad, len: self.cols });
        }
        Ok(Matrix::from_fn(self.rows, indices.len(), |i, k| self[(i, indices[k])]))
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn scaled(&self, factor: f64) -> Matrix {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= factor);
        out
    }

    pub fn scale_in_place(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// `self += factor * other`.
    pub fn axpy(&mut self, factor: f64, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_pair("axpy", self, other));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(shape_pair(op, self, other));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        finite(Matrix::wrap(self.rows, self.cols, data), op)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Largest elementwise absolute difference. Panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    /// `max |M - Mᵀ|` for a square matrix.
    pub fn asymmetry(&self) -> f64 {
        assert_eq!(self.rows, self.cols);
        let mut worst = 0.0_f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// `(M + Mᵀ) / 2`.
    pub fn symmetrized(&self) -> Matrix {
        assert_eq!(self.rows, self.cols);
        Matrix::from_fn(self.rows, self.cols, |i, j| 0.5 * (self[(i, j)] + self[(j, i)]))
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// `xᵀ M x` for a square matrix.
    pub fn quadratic_form(&self, x: &[f64]) -> Result<f64> {
        if self.rows != self.cols || x.len() != self.rows {
            return Err(Error::shape(
                "quadratic_form",
                format!("{}x{} matrix with vector of length {}", self.rows, self.cols, x.len()),
            ));
        }
        let mut acc = 0.0;
        for i in 0..self.rows {
            let row = self.row(i);
            let inner: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
            acc += x[i] * inner;
        }
        Ok(acc)
    }

    /// `M x` for a vector `x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::shape(
                "matvec",
                format!("{}x{} matrix with vector of length {}", self.rows, self.cols, x.len()),
            ));
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn shape_pair(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::shape(op, format!("{}x{} vs {}x{}", a.rows, a.cols, b.rows, b.cols))
}

fn finite(m: Matrix, op: &'static str) -> Result<Matrix> {
    if m.is_finite() {
        Ok(m)
    } else {
        Err(Error::NonFinite { op })
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Matrix product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{}x{} times {}x{}: inner dimensions {} != {}", a.rows, a.cols, b.rows, b.cols, a.cols, b.rows),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    finite(out, "matmul")
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::shape("matmul_nt", format!("{}x{} times ({}x{})ᵀ", a.rows, a.cols, b.rows, b.cols)));
    }
    let out = Matrix::from_fn(a.rows, b.rows, |i, j| dot(a.row(i), b.row(j)));
    finite(out, "matmul_nt")
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::shape("matmul_tn", format!("({}x{})ᵀ times {}x{}", a.rows, a.cols, b.rows, b.cols)));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let a_row = a.row(k);
        let b_row = b.row(k);
        for (i, &aki) in a_row.iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aki * bkj;
            }
        }
    }
    finite(out, "matmul_tn")
}

/// Gram matrix `WᵀW`, exactly symmetric.
pub fn gram(w: &Matrix) -> Result<Matrix> {
    let n = w.cols;
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut acc = 0.0;
            for k in 0..w.rows {
                acc += w[(k, i)] * w[(k, j)];
            }
            out[(i, j)] = acc;
            out[(j, i)] = acc;
        }
    }
    finite(out, "gram")
}

/// Scales every column to unit ℓ₂ norm. Columns with norm at or below
/// [`ZERO_COLUMN_TOL`] are left untouched and flagged in the mask.
pub fn normalize_columns(m: &Matrix) -> (Matrix, Vec<bool>) {
    let mut out = m.clone();
    let mut mask = vec![false; m.cols];
    for (j, dead) in mask.iter_mut().enumerate() {
        let col = m.column(j);
        let nrm = norm(&col);
        if nrm <= ZERO_COLUMN_TOL {
            *dead = true;
            continue;
        }
        for (i, v) in col.iter().enumerate() {
            out[(i, j)] = v / nrm;
        }
    }
    (out, mask)
}

/// Rank-1 matrix `u vᵀ`.
pub fn outer(u: &[f64], v: &[f64]) -> Matrix {
    Matrix::from_fn(u.len(), v.len(), |i, j| u[i] * v[j])
}

/// Kronecker product; block `(i, j)` of the result is `a[i, j] · b`.
pub fn kron(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let rows = a.rows * b.rows;
    let cols = a.cols * b.cols;
    let required = rows * cols;
    if required > KRON_ENTRY_LIMIT {
        return Err(Error::KronTooLarge { rows, cols, required, limit: KRON_ENTRY_LIMIT });
    }
    let out = Matrix::from_fn(rows, cols, |r, c| {
        a[(r / b.rows, c / b.cols)] * b[(r % b.rows, c % b.cols)]
    });
    finite(out, "kron")
}

/// Indices of the `k` smallest values, ordered by `(value, index)`.
pub fn topk_min(values: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > values.len() {
        return Err(Error::TopKTooLarge { k, len: values.len() });
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// Singular value decomposition `M = U · diag(sigma) · Vᵀ` with square
/// orthogonal `U` (m×m) and `V` (n×n).
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    /// Recomposes `U_h · diag(sigma) · V_hᵀ` from the leading `h` columns.
    pub fn reconstruct(&self) -> Matrix {
        let (m, n) = (self.u.rows, self.v.rows);
        Matrix::from_fn(m, n, |i, j| {
            self.sigma
                .iter()
                .enumerate()
                .map(|(k, s)| self.u[(i, k)] * s * self.v[(j, k)])
                .sum()
        })
    }
}

/// One-sided Jacobi SVD.
///
/// The sign of each left singular vector is fixed so that its entry of
/// largest magnitude is non-negative; the paired right vector follows.
/// Right vectors without a partner (null space when m < n) use the same rule
/// on their own entries.
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if m.rows >= m.cols {
        let (left, sigma, right) = jacobi_tall(m)?;
        Ok(fix_signs(left, sigma, right))
    } else {
        let (left, sigma, right) = jacobi_tall(&m.transpose())?;
        Ok(fix_signs(right, sigma, left))
    }
}

/// Jacobi on a tall (rows ≥ cols) matrix. Returns `(U m×m, sigma, V n×n)`.
fn jacobi_tall(a: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let (m, n) = a.shape();
    // Work column-major: cols[j] is column j of the rotating matrix.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let tol = f64::EPSILON * (m as f64).max(1.0);

    let mut converged = n < 2;
    let mut sweeps = 0;
    while !converged && sweeps < SVD_MAX_SWEEPS {
        sweeps += 1;
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::SvdNoConvergence { sweeps, residual: off_diagonal_residual(&cols) });
    }

    let raw_sigma: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| raw_sigma[y].total_cmp(&raw_sigma[x]).then(x.cmp(&y)));

    let sigma: Vec<f64> = order.iter().map(|&j| raw_sigma[j]).collect();
    let sigma_max = sigma.first().copied().unwrap_or(0.0);
    let rank_floor = sigma_max * f64::EPSILON * (m.max(n) as f64);

    let mut left: Vec<Vec<f64>> = Vec::with_capacity(m);
    for &j in &order {
        let s = raw_sigma[j];
        if s > rank_floor && s > 0.0 {
            left.push(cols[j].iter().map(|x| x / s).collect());
        } else {
            break;
        }
    }
    complete_orthonormal(&mut left, m);

    let u = Matrix::from_fn(m, m, |i, k| left[k][i]);
    let v = Matrix::from_fn(n, n, |i, k| vcols[order[k]][i]);
    Ok((u, sigma, v))
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

fn off_diagonal_residual(cols: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0_f64;
    for p in 0..cols.len() {
        for q in p + 1..cols.len() {
            let denom = (dot(&cols[p], &cols[p]) * dot(&cols[q], &cols[q])).sqrt();
            if denom > 0.0 {
                worst = worst.max(dot(&cols[p], &cols[q]).abs() / denom);
            }
        }
    }
    worst
}

/// Extends an orthonormal set of vectors in ℝᵈ to a full basis using
/// Gram-Schmidt (applied twice) on the standard basis vectors.
fn complete_orthonormal(basis: &mut Vec<Vec<f64>>, dim: usize) {
    while basis.len() < dim {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for k in 0..dim {
            let mut cand = vec![0.0; dim];
            cand[k] = 1.0;
            for _ in 0..2 {
                for b in basis.iter() {
                    let proj = dot(&cand, b);
                    cand.iter_mut().zip(b).for_each(|(c, bi)| *c -= proj * bi);
                }
            }
            let nrm = norm(&cand);
            if best.as_ref().is_none_or(|(bn, _)| nrm > *bn + 1e-12) {
                best = Some((nrm, cand));
            }
        }
        let (nrm, mut cand) = best.expect("dim > 0");
        cand.iter_mut().for_each(|c| *c /= nrm);
        basis.push(cand);
    }
}

fn largest_entry_negative(col: &[f64]) -> bool {
    let mut idx = 0;
    for (i, v) in col.iter().enumerate() {
        if v.abs() > col[idx].abs() {
            idx = i;
        }
    }
    col[idx] < 0.0
}

fn fix_signs(mut u: Matrix, sigma: Vec<f64>, mut v: Matrix) -> SvdResult {
    let h = sigma.len();
    for k in 0..u.cols {
        if largest_entry_negative(&u.column(k)) {
            for i in 0..u.rows {
                u[(i, k)] = -u[(i, k)];
            }
            if k < h {
                for i in 0..v.rows {
                    v[(i, k)] = -v[(i, k)];
                }
            }
        }
    }
    for k in h..v.cols {
        if largest_entry_negative(&v.column(k)) {
            for i in 0..v.rows {
                v[(i, k)] = -v[(i, k)];
            }
        }
    }
    SvdResult { u, sigma, v }
}

/// Numerical rank: singular values above `rel_tol · σ₁`.
pub fn numerical_rank(m: &Matrix, rel_tol: f64) -> Result<usize> {
    let s = svd(m)?;
    let top = s.sigma.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return Ok(0);
    }
    Ok(s.sigma.iter().filter(|&&x| x > rel_tol * top).count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a[(i, k)] * b[(k, j)];
                }
                out[(i, j)] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_examples() {
        let x = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &x).unwrap(), x);
        let p = matmul(&m(&[&[1.0, 0.0], &[0.0, 2.0]]), &m(&[&[0.0, 1.0], &[1.0, 0.0]])).unwrap();
        assert_eq!(p, m(&[&[0.0, 1.0], &[2.0, 0.0]]));

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Matrix::random_normal(5, 4, &mut rng);
        let b = Matrix::random_normal(4, 3, &mut rng);
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) <= 1e-12);
        assert!(matmul_nt(&a, &b.transpose()).unwrap().max_abs_diff(&naive_matmul(&a, &b)) <= 1e-12);
        assert!(matmul_tn(&a.transpose(), &b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) <= 1e-12);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
        assert!(err.to_string().contains("2x3 times 2x3"));
    }

    #[test]
    fn matmul_reports_overflow() {
        let big = Matrix::from_vec(1, 1, vec![1e200]).unwrap();
        assert!(matches!(matmul(&big, &big), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn from_vec_validation() {
        assert!(matches!(Matrix::from_vec(0, 2, vec![]), Err(Error::EmptyShape { .. })));
        assert!(matches!(Matrix::from_vec(2, 2, vec![1.0; 3]), Err(Error::BufferLength { .. })));
        assert!(matches!(Matrix::from_vec(1, 1, vec![f64::NAN]), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn gram_examples() {
        assert_eq!(gram(&m(&[&[1.0, 0.0], &[0.0, 2.0]])).unwrap(), Matrix::diag(&[1.0, 4.0]));
        assert_eq!(gram(&Matrix::identity(3)).unwrap(), Matrix::identity(3));
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = Matrix::random_normal(4, 3, &mut rng);
        let g = gram(&w).unwrap();
        assert!(g.max_abs_diff(&naive_matmul(&w.transpose(), &w)) <= 1e-12);
        assert!(g.asymmetry() <= 1e-12);
    }

    #[test]
    fn normalize_examples() {
        let (out, mask) = normalize_columns(&m(&[&[3.0, 0.0], &[4.0, 0.0]]));
        assert!(out.max_abs_diff(&m(&[&[0.6, 0.0], &[0.8, 0.0]])) <= 1e-15);
        assert_eq!(mask, vec![false, true]);
        let (out, mask) = normalize_columns(&Matrix::identity(2));
        assert_eq!(out, Matrix::identity(2));
        assert_eq!(mask, vec![false, false]);

        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (out, mask) = normalize_columns(&Matrix::random_normal(6, 6, &mut rng));
        for j in 0..6 {
            assert!(!mask[j]);
            assert!((norm(&out.column(j)) - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn svd_examples() {
        let s = svd(&Matrix::diag(&[3.0, 1.0])).unwrap();
        assert_eq!(s.sigma, vec![3.0, 1.0]);
        assert!(s.u.max_abs_diff(&Matrix::identity(2)) <= 1e-15);
        assert!(s.v.max_abs_diff(&Matrix::identity(2)) <= 1e-15);

        let s = svd(&m(&[&[0.0, 2.0], &[2.0, 0.0]])).unwrap();
        assert!((s.sigma[0] - 2.0).abs() <= 1e-14 && (s.sigma[1] - 2.0).abs() <= 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let a = Matrix::random_normal(5, 3, &mut rng);
        let s = svd(&a).unwrap();
        assert!(s.reconstruct().sub(&a).unwrap().frobenius_norm() <= 1e-8);
    }

    #[test]
    fn svd_sign_convention_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let a = Matrix::random_normal(4, 6, &mut rng);
        let s1 = svd(&a).unwrap();
        let s2 = svd(&a).unwrap();
        assert_eq!(s1.u, s2.u);
        assert_eq!(s1.v, s2.v);
        for k in 0..4 {
            assert!(!largest_entry_negative(&s1.u.column(k)));
        }
    }

    #[test]
    fn svd_rank_deficient_completes_bases() {
        // rank 1, 3x3
        let a = outer(&[1.0, 2.0, 2.0], &[2.0, 0.0, 1.0]);
        let s = svd(&a).unwrap();
        let eye = Matrix::identity(3);
        assert!(matmul_tn(&s.u, &s.u).unwrap().max_abs_diff(&eye) <= 1e-12);
        assert!(matmul_tn(&s.v, &s.v).unwrap().max_abs_diff(&eye) <= 1e-12);
        assert!(s.reconstruct().max_abs_diff(&a) <= 1e-12);
        assert_eq!(numerical_rank(&a, 1e-8).unwrap(), 1);

        let z = svd(&Matrix::zeros(2, 3)).unwrap();
        assert_eq!(z.sigma, vec![0.0, 0.0]);
        assert!(matmul_tn(&z.v, &z.v).unwrap().max_abs_diff(&Matrix::identity(3)) <= 1e-12);
    }

    #[test]
    fn kron_examples() {
        assert_eq!(kron(&Matrix::identity(2), &Matrix::identity(2)).unwrap(), Matrix::identity(4));
        let k = kron(&m(&[&[2.0]]), &Matrix::diag(&[1.0, 3.0])).unwrap();
        assert_eq!(k, Matrix::diag(&[2.0, 6.0]));

        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let a = Matrix::random_normal(3, 3, &mut rng);
        let b = Matrix::random_normal(2, 2, &mut rng);
        let k = kron(&a, &b).unwrap();
        for bi in 0..3 {
            for bj in 0..3 {
                for i in 0..2 {
                    for j in 0..2 {
                        assert_eq!(k[(bi * 2 + i, bj * 2 + j)], a[(bi, bj)] * b[(i, j)]);
                    }
                }
            }
        }
    }

    #[test]
    fn kron_guard() {
        let a = Matrix::zeros(40, 40);
        let err = kron(&a, &a).unwrap_err();
        match err {
            Error::KronTooLarge { required, .. } => assert_eq!(required, 1600 * 1600),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_min(&[3.0, 1.0, 2.0], 2).unwrap(), vec![1, 2]);
        assert_eq!(topk_min(&[5.0, 5.0, 5.0], 2).unwrap(), vec![0, 1]);
        assert!(matches!(topk_min(&[1.0], 2), Err(Error::TopKTooLarge { k: 2, len: 1 })));

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let values: Vec<f64> = (0..100).map(|_| rng.random::<f64>()).collect();
        let mut sorted: Vec<(f64, usize)> = values.iter().copied().zip(0..).collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let oracle: Vec<usize> = sorted.iter().take(10).map(|p| p.1).collect();
        assert_eq!(topk_min(&values, 10).unwrap(), oracle);
    }

    #[test]
    fn outer_examples() {
        assert_eq!(outer(&[1.0, 0.0], &[1.0, 0.0]), m(&[&[1.0, 0.0], &[0.0, 0.0]]));
        assert_eq!(outer(&[1.0, 2.0], &[3.0, 4.0]), m(&[&[3.0, 4.0], &[6.0, 8.0]]));
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut u: Vec<f64> = (0..5).map(|_| rng.sample(StandardNormal)).collect();
        let mut v: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
        let (nu, nv) = (norm(&u), norm(&v));
        u.iter_mut().for_each(|x| *x /= nu);
        v.iter_mut().for_each(|x| *x /= nv);
        assert!((outer(&u, &v).frobenius_norm() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn alloc_tracking_counts_live_matrices() {
        alloc_stats::reset_peak();
        let base = alloc_stats::live_bytes();
        let a = Matrix::zeros(10, 10);
        let b = a.clone();
        assert_eq!(alloc_stats::live_bytes(), base + 1600);
        drop(a);
        drop(b);
        assert_eq!(alloc_stats::live_bytes(), base);
        assert!(alloc_stats::peak_bytes() >= base + 1600);
    }
}
