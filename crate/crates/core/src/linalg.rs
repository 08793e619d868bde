//! Dense row-major matrices and the factorizations the regression code needs.
//!
//! Everything here is `f64`. Matrix products go through `matrixmultiply`;
//! the Cholesky factorization and triangular solves are written out directly
//! so that the positive-definiteness test can be controlled precisely.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A pivot smaller than this fraction of the largest diagonal entry is
/// treated as a failed factorization.
pub const PD_RELATIVE_TOLERANCE: f64 = 1e-12;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::from_vec(raw.rows, raw.cols, raw.data)
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; intended for
    /// literals and tests.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn column(values: &[f64]) -> Self {
        Matrix {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Matrix {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let mut m = Matrix::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
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

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col_to_vec(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    /// Copies rows `start..end` into a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.rows, "row range out of bounds");
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "zip_map shape mismatch");
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

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scaled_add_assign(&mut self, s: f64, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "scaled_add shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn trace(&self) -> f64 {
        self.diag().iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Infinity norm (maximum absolute row sum).
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|r| self.row(r).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Replaces the matrix with `(M + Mᵀ) / 2`.
    pub fn symmetrize(&mut self) {
        assert!(self.is_square());
        let n = self.rows;
        for i in 0..n {
            for j in (i + 1)..n {
                let avg = 0.5 * (self.data[i * n + j] + self.data[j * n + i]);
                self.data[i * n + j] = avg;
                self.data[j * n + i] = avg;
            }
        }
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape("matmul", self.shape(), other.shape()));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(self, false, other, false, 0.0, &mut out);
        Ok(out)
    }

    /// `selfᵀ · other`
    pub fn tr_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::shape("tr_matmul", self.shape(), other.shape()));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        gemm(self, true, other, false, 0.0, &mut out);
        Ok(out)
    }

    /// `self · otherᵀ`
    pub fn matmul_tr(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::shape("matmul_tr", self.shape(), other.shape()));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        gemm(self, false, other, true, 0.0, &mut out);
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec shape mismatch");
        (0..self.rows).map(|r| dot(self.row(r), v)).collect()
    }

    /// `selfᵀ · v`
    pub fn tr_matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, v.len(), "tr_matvec shape mismatch");
        let mut out = vec![0.0; self.cols];
        for (r, &s) in v.iter().enumerate() {
            if s != 0.0 {
                for (o, a) in out.iter_mut().zip(self.row(r)) {
                    *o += s * a;
                }
            }
        }
        out
    }

    /// Symmetric quadratic form `vᵀ M v`.
    pub fn quad_form(&self, v: &[f64]) -> f64 {
        dot(v, &self.matvec(v))
    }

    /// Kronecker product `self ⊗ other`.
    pub fn kron(&self, other: &Matrix) -> Matrix {
        let (r1, c1) = self.shape();
        let (r2, c2) = other.shape();
        Matrix::from_fn(r1 * r2, c1 * c2, |r, c| {
            self[(r / r2, c / c2)] * other[(r % r2, c % c2)]
        })
    }

    /// Column-stacking vectorization.
    pub fn vec_columns(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                out.push(self[(r, c)]);
            }
        }
        out
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn outer(u: &[f64], v: &[f64]) -> Matrix {
    Matrix::from_fn(u.len(), v.len(), |r, c| u[r] * v[c])
}

/// `out = op(a) · op(b) + beta · out`, shapes already checked by the caller.
pub(crate) fn gemm(a: &Matrix, ta: bool, b: &Matrix, tb: bool, beta: f64, out: &mut Matrix) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let n = if tb { b.rows } else { b.cols };
    debug_assert_eq!(out.shape(), (m, n));
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in out.data.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: strides describe the row-major buffers of `a`, `b` and `out`,
    // whose lengths match the (m, k), (k, n) and (m, n) shapes checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Lower Cholesky factor `L` with `L Lᵀ = A`. Only the lower triangle of `A`
/// is read.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::shape("cholesky", a.shape(), a.shape()));
    }
    let n = a.rows;
    let max_diag = a.diag().iter().fold(0.0_f64, |m, v| m.max(*v));
    let tol = PD_RELATIVE_TOLERANCE * max_diag;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let (above, rest) = l.data.split_at_mut((j + 1) * n);
        let row_j = &mut above[j * n..];
        let pivot = a.data[j * n + j] - dot(&row_j[..j], &row_j[..j]);
        if !(pivot > tol && pivot.is_finite()) {
            return Err(Error::NotPositiveDefinite { index: j, pivot });
        }
        let pivot = pivot.sqrt();
        row_j[j] = pivot;
        let row_j = &above[j * n..];
        for (offset, row_i) in rest.chunks_exact_mut(n).enumerate() {
            let i = j + 1 + offset;
            let s = a.data[i * n + j] - dot(&row_i[..j], &row_j[..j]);
            row_i[j] = s / pivot;
        }
    }
    Ok(l)
}

/// Solves `L X = B` for lower-triangular `L`.
pub fn solve_lower(l: &Matrix, b: &Matrix) -> Result<Matrix> {
    if !l.is_square() || l.rows != b.rows {
        return Err(Error::shape("solve_lower", l.shape(), b.shape()));
    }
    let n = l.rows;
    let m = b.cols;
    let mut x = b.clone();
    for i in 0..n {
        let (solved, rest) = x.data.split_at_mut(i * m);
        let xi = &mut rest[..m];
        let li = l.row(i);
        for (k, &lik) in li[..i].iter().enumerate() {
            if lik != 0.0 {
                let xk = &solved[k * m..(k + 1) * m];
                for (a, b) in xi.iter_mut().zip(xk) {
                    *a -= lik * b;
                }
            }
        }
        let d = li[i];
        for a in xi.iter_mut() {
            *a /= d;
        }
    }
    Ok(x)
}

/// Solves `Lᵀ X = B` for lower-triangular `L`.
pub fn solve_lower_tr(l: &Matrix, b: &Matrix) -> Result<Matrix> {
    if !l.is_square() || l.rows != b.rows {
        return Err(Error::shape("solve_lower_tr", l.shape(), b.shape()));
    }
    let n = l.rows;
    let m = b.cols;
    let mut x = b.clone();
    for i in (0..n).rev() {
        let d = l[(i, i)];
        {
            let xi = &mut x.data[i * m..(i + 1) * m];
            for a in xi.iter_mut() {
                *a /= d;
            }
        }
        // Eliminate x_i from the rows above: row k gets -L[i][k] * x_i.
        let (above, rest) = x.data.split_at_mut(i * m);
        let xi = &rest[..m];
        for k in 0..i {
            let lik = l[(i, k)];
            if lik != 0.0 {
                let xk = &mut above[k * m..(k + 1) * m];
                for (a, b) in xk.iter_mut().zip(xi) {
                    *a -= lik * b;
                }
            }
        }
    }
    Ok(x)
}

/// Solves `A X = B` given the Cholesky factor of `A`.
pub fn cholesky_solve(l: &Matrix, b: &Matrix) -> Result<Matrix> {
    let y = solve_lower(l, b)?;
    solve_lower_tr(l, &y)
}

/// Solves `A X = B` for symmetric positive definite `A` through its Cholesky
/// factor.
pub fn solve_psd(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if !a.is_square() || a.rows != b.rows {
        return Err(Error::shape("solve_psd", a.shape(), b.shape()));
    }
    let l = cholesky(a)?;
    cholesky_solve(&l, b)
}

/// Inverse of an SPD matrix, symmetrized.
pub fn inverse_psd(a: &Matrix) -> Result<Matrix> {
    let mut inv = solve_psd(a, &Matrix::identity(a.rows))?;
    inv.symmetrize();
    Ok(inv)
}

/// `ln det A` from the Cholesky factor of `A`.
pub fn log_det_from_cholesky(l: &Matrix) -> f64 {
    2.0 * l.diag().iter().map(|d| d.ln()).sum::<f64>()
}

/// In-place symmetric rank-1 update `M ← M + alpha · u uᵀ`.
pub fn sym_rank1_update(m: &mut Matrix, alpha: f64, u: &[f64]) {
    assert!(m.is_square() && m.rows == u.len(), "rank-1 update shape mismatch");
    let n = m.rows;
    for i in 0..n {
        let s = alpha * u[i];
        if s == 0.0 {
            continue;
        }
        let row = &mut m.data[i * n..(i + 1) * n];
        for (a, b) in row.iter_mut().zip(u) {
            *a += s * b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_spd(n: usize, rng: &mut impl Rng) -> Matrix {
        let g = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let mut a = g.matmul_tr(&g).unwrap();
        for i in 0..n {
            a[(i, i)] += n as f64 * 0.1;
        }
        a
    }

    #[test]
    fn cholesky_identity() {
        let l = cholesky(&Matrix::identity(3)).unwrap();
        assert_eq!(l, Matrix::identity(3));
    }

    #[test]
    fn cholesky_two_by_two() {
        let a = Matrix::from_rows(&[[4.0, 2.0], [2.0, 3.0]]);
        let l = cholesky(&a).unwrap();
        let expected = Matrix::from_rows(&[[2.0, 0.0], [1.0, 2f64.sqrt()]]);
        assert!(l.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]);
        assert!(matches!(
            cholesky(&a),
            Err(Error::NotPositiveDefinite { index: 1, .. })
        ));
    }

    #[test]
    fn cholesky_rejects_tiny_relative_pivot() {
        let a = Matrix::diagonal(&[1.0, 1e-13]);
        assert!(cholesky(&a).is_err());
        let b = Matrix::diagonal(&[1.0, 1e-11]);
        assert!(cholesky(&b).is_ok());
    }

    #[test]
    fn cholesky_reconstructs_random_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &n in &[1, 2, 5, 17, 64] {
            let a = random_spd(n, &mut rng);
            let l = cholesky(&a).unwrap();
            for i in 0..n {
                assert!(l[(i, i)] > 0.0);
                for j in (i + 1)..n {
                    assert_eq!(l[(i, j)], 0.0);
                }
            }
            let rec = l.matmul_tr(&l).unwrap();
            assert!(rec.sub(&a).norm_inf() < 1e-10 * a.norm_inf(), "n = {n}");
        }
    }

    #[test]
    fn solve_psd_identity_and_scaling() {
        let b = Matrix::from_rows(&[[1.5, -2.0], [0.25, 7.0], [3.0, 0.0]]);
        assert_eq!(solve_psd(&Matrix::identity(3), &b).unwrap(), b);

        let a = Matrix::diagonal(&[2.0, 2.0]);
        let x = solve_psd(&a, &Matrix::column(&[4.0, 6.0])).unwrap();
        assert!(x.max_abs_diff(&Matrix::column(&[2.0, 3.0])) <= 4.0 * f64::EPSILON);
    }

    #[test]
    fn solve_psd_diagonal_is_exact() {
        let d = [3.0, 0.5, 8.0, 1.25];
        let a = Matrix::diagonal(&d);
        let b = Matrix::column(&[1.0, 2.0, 3.0, 4.0]);
        let x = solve_psd(&a, &b).unwrap();
        for i in 0..4 {
            let exact = b[(i, 0)] / d[i];
            assert!((x[(i, 0)] - exact).abs() <= 2.0 * f64::EPSILON * exact.abs());
        }
    }

    #[test]
    fn solve_psd_random_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let a = random_spd(5, &mut rng);
            let b = Matrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
            let x = solve_psd(&a, &b).unwrap();
            let res = a.matmul(&x).unwrap().sub(&b);
            assert!(res.max_abs() < 1e-10);
        }
    }

    #[test]
    fn solve_psd_shape_error() {
        let err = solve_psd(&Matrix::identity(3), &Matrix::zeros(2, 1));
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn triangular_solves_agree_with_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_spd(6, &mut rng);
        let l = cholesky(&a).unwrap();
        let b = Matrix::from_fn(6, 2, |_, _| rng.random_range(-1.0..1.0));
        let x = solve_lower(&l, &b).unwrap();
        assert!(l.matmul(&x).unwrap().max_abs_diff(&b) < 1e-12);
        let y = solve_lower_tr(&l, &b).unwrap();
        assert!(l.tr_matmul(&y).unwrap().max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn transposed_products() {
        let a = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let b = Matrix::from_rows(&[[1.0, 0.0], [0.5, 1.0]]);
        assert_eq!(a.tr_matmul(&b).unwrap(), a.transpose().matmul(&b).unwrap());
        assert_eq!(a.matmul_tr(&a).unwrap(), a.matmul(&a.transpose()).unwrap());
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn rank1_update_matches_outer_product() {
        let mut m = Matrix::identity(3);
        let u = [1.0, -2.0, 0.5];
        sym_rank1_update(&mut m, 0.5, &u);
        let expected = Matrix::identity(3).add(&outer(&u, &u).scale(0.5));
        assert!(m.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn kron_shape_and_entries() {
        let a = Matrix::from_rows(&[[1.0, 2.0]]);
        let b = Matrix::from_rows(&[[0.0], [3.0]]);
        let k = a.kron(&b);
        assert_eq!(k, Matrix::from_rows(&[[0.0, 0.0], [3.0, 6.0]]));
    }

    #[test]
    fn serde_rejects_bad_length() {
        let bad = r#"{"rows":2,"cols":2,"data":[1.0,2.0,3.0]}"#;
        assert!(serde_json::from_str::<Matrix>(bad).is_err());
    }
}
