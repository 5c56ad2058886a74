//! Dense real linear algebra on row-major `f64` matrices.
//!
//! Everything here is sized for the small problems this crate works with
//! (d up to a few hundred): symmetric eigendecomposition by cyclic Jacobi
//! rotations, singular values by one-sided Jacobi, PSD square roots and a
//! pivoted LU solve.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Symmetry tolerance accepted by [`sym_eig`], relative to the largest entry.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Jacobi sweeps stop once the off-diagonal Frobenius norm drops below this
/// fraction of the input norm.
const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
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

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix entries".into()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diag(&vec![1.0; n])
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
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

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
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
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · rhsᵀ`, the natural product when both operands store samples
    /// as rows.
    pub fn matmul_t(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by transpose of {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        Ok(Matrix::from_fn(self.rows, rhs.rows, |i, j| {
            dot(self.row(i), rhs.row(j))
        }))
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::Shape(format!(
                "cannot apply {}x{} matrix to vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// `selfᵀ · self`. With samples stored as rows this is the d×d Gram
    /// matrix `X Xᵀ` of the column-sample convention.
    pub fn gram(&self) -> Matrix {
        let d = self.cols;
        let mut g = Matrix::zeros(d, d);
        for r in 0..self.rows {
            let row = self.row(r);
            for i in 0..d {
                let ri = row[i];
                if ri == 0.0 {
                    continue;
                }
                for j in i..d {
                    g.data[i * d + j] += ri * row[j];
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                g.data[i * d + j] = g.data[j * d + i];
            }
        }
        g
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, |a, b| a - b)
    }

    fn zip_with(&self, rhs: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::Shape(format!(
                "elementwise op on {}x{} and {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// `self + s·I` for square matrices.
    pub fn add_identity(&self, s: f64) -> Result<Matrix> {
        if !self.is_square() {
            return Err(Error::Shape("add_identity needs a square matrix".into()));
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            out[(i, i)] += s;
        }
        Ok(out)
    }

    /// Stacks `self` on top of `other` (concatenating sample sets).
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "cannot stack {} columns on {} columns",
                self.cols, other.cols
            )));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn trace(&self) -> f64 {
        self.diagonal().iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest `|a_ij − a_ji|`; infinite for non-square input.
    pub fn max_asymmetry(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    pub fn column_means(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (m, v) in mean.iter_mut().zip(self.row(i)) {
                *m += v;
            }
        }
        let n = self.rows.max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    /// Rows minus the column means.
    pub fn centered(&self) -> Matrix {
        let mean = self.column_means();
        let mut out = self.clone();
        for i in 0..out.rows {
            for (v, m) in out.row_mut(i).iter_mut().zip(&mean) {
                *v -= m;
            }
        }
        out
    }

    /// Unbiased sample covariance of the rows (d×d).
    pub fn sample_covariance(&self) -> Matrix {
        let denom = (self.rows.saturating_sub(1)).max(1) as f64;
        self.centered().gram().scale(1.0 / denom)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Eigendecomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEig {
    /// Sorted descending.
    pub eigenvalues: Vec<f64>,
    /// Orthonormal eigenvectors stored as columns, in eigenvalue order.
    pub eigenvectors: Matrix,
}

impl SymEig {
    pub fn max(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(0.0)
    }

    pub fn min(&self) -> f64 {
        self.eigenvalues.last().copied().unwrap_or(0.0)
    }

    /// `Q · diag(f(λ)) · Qᵀ`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let q = &self.eigenvectors;
        let n = q.rows();
        let mapped: Vec<f64> = self.eigenvalues.iter().map(|&l| f(l)).collect();
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut s = 0.0;
                for (k, &m) in mapped.iter().enumerate() {
                    s += q[(i, k)] * m * q[(j, k)];
                }
                out[(i, j)] = s;
                out[(j, i)] = s;
            }
        }
        out
    }

    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_with(|l| l)
    }
}

fn check_symmetric(a: &Matrix) -> Result<()> {
    if !a.is_square() {
        return Err(Error::Shape(format!(
            "expected a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("symmetric eigendecomposition input".into()));
    }
    let asym = a.max_asymmetry();
    if asym > SYMMETRY_TOL * a.max_abs().max(1.0) {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    Ok(())
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
pub fn sym_eig(a: &Matrix) -> Result<SymEig> {
    check_symmetric(a)?;
    let n = a.rows();
    let mut m = Matrix::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]));
    let mut v = Matrix::identity(n);
    let scale = m.frobenius_norm();

    let off = |m: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[(i, j)] * m[(i, j)];
                }
            }
        }
        s.sqrt()
    };

    let mut sweeps = 0;
    while scale > 0.0 && off(&m) > JACOBI_TOL * scale {
        if sweeps == JACOBI_MAX_SWEEPS {
            log::warn!("jacobi eigensolver hit the sweep limit ({JACOBI_MAX_SWEEPS})");
            break;
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]));
    let eigenvalues = order.iter().map(|&i| m[(i, i)]).collect();
    let eigenvectors = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(SymEig {
        eigenvalues,
        eigenvectors,
    })
}

/// Square root of a symmetric positive semi-definite matrix.
///
/// Slightly negative eigenvalues (rounding in sample covariances) are clamped
/// to zero; anything clearly negative is rejected.
pub fn psd_sqrt(a: &Matrix) -> Result<Matrix> {
    let eig = sym_eig(a)?;
    let scale = eig.max().abs().max(1.0);
    let min = eig.min();
    if min < -1e-6 * scale {
        return Err(Error::NotPsd {
            min_eigenvalue: min,
        });
    }
    if min < -1e-8 * scale {
        log::warn!("psd_sqrt: clamping eigenvalue {min:e} to zero");
    }
    // Eigenvalues at rounding level are zero.
    let cut = 16.0 * a.rows() as f64 * f64::EPSILON * eig.max().abs();
    Ok(eig.reconstruct_with(|l| if l <= cut { 0.0 } else { l.sqrt() }))
}

/// Singular values (descending) by one-sided Jacobi orthogonalisation.
pub fn singular_values(a: &Matrix) -> Vec<f64> {
    // Work on the orientation with fewer columns.
    let w = if a.rows() >= a.cols() {
        a.clone()
    } else {
        a.transpose()
    };
    let (m, n) = w.shape();
    if m == 0 || n == 0 {
        return Vec::new();
    }
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| w.column(j)).collect();
    for _ in 0..60 {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(q);
                for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let xp = *x;
                    let yq = *y;
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = cols.iter().map(|c| norm2(c)).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

pub fn spectral_norm(a: &Matrix) -> f64 {
    singular_values(a).first().copied().unwrap_or(0.0)
}

pub fn frobenius_norm(a: &Matrix) -> f64 {
    a.frobenius_norm()
}

/// Number of singular values `>= tau`.
pub fn numerical_rank(a: &Matrix, tau: f64) -> Result<usize> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "rank threshold must be positive, got {tau}"
        )));
    }
    Ok(singular_values(a).iter().filter(|&&s| s >= tau).count())
}

/// Solves `A x = b` by LU decomposition with partial pivoting.
pub fn solve(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows();
    if !a.is_square() || b.len() != n {
        return Err(Error::Shape(format!(
            "solve needs square A matching b; got {}x{} and {}",
            a.rows(),
            a.cols(),
            b.len()
        )));
    }
    let mut lu = a.clone();
    let mut x = b.to_vec();
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    for k in 0..n {
        let pivot = (k..n)
            .max_by(|&i, &j| lu[(i, k)].abs().total_cmp(&lu[(j, k)].abs()))
            .unwrap();
        if lu[(pivot, k)].abs() <= 1e-14 * scale {
            return Err(Error::IllPosed("singular matrix in solve".into()));
        }
        if pivot != k {
            for j in 0..n {
                let tmp = lu[(k, j)];
                lu[(k, j)] = lu[(pivot, j)];
                lu[(pivot, j)] = tmp;
            }
            x.swap(k, pivot);
        }
        for i in (k + 1)..n {
            let f = lu[(i, k)] / lu[(k, k)];
            if f == 0.0 {
                continue;
            }
            for j in k..n {
                lu[(i, j)] -= f * lu[(k, j)];
            }
            x[i] -= f * x[k];
        }
    }
    for k in (0..n).rev() {
        let mut s = x[k];
        for j in (k + 1)..n {
            s -= lu[(k, j)] * x[j];
        }
        x[k] = s / lu[(k, k)];
    }
    Ok(x)
}

#[cfg(test)]
pub(crate) mod test_util {
    use super::Matrix;
    use crate::data::RngStream;

    pub fn random_matrix(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.normal())
    }

    pub fn random_symmetric(n: usize, rng: &mut RngStream) -> Matrix {
        let a = random_matrix(n, n, rng);
        Matrix::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]))
    }

    pub fn random_psd(n: usize, rng: &mut RngStream) -> Matrix {
        random_matrix(n + 2, n, rng).gram()
    }

    pub fn rel_frob(a: &Matrix, b: &Matrix) -> f64 {
        a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm().max(f64::MIN_POSITIVE)
    }
}

#[cfg(test)]
mod tests {
    use super::test_util::*;
    use super::*;
    use crate::data::RngStream;

    #[test]
    fn eig_of_diagonal() {
        let e = sym_eig(&Matrix::from_diag(&[1.0, 4.0])).unwrap();
        assert_eq!(e.eigenvalues, vec![4.0, 1.0]);
        assert!((e.eigenvectors[(1, 0)].abs() - 1.0).abs() < 1e-15);
        assert!((e.eigenvectors[(0, 1)].abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn eig_of_identity() {
        let e = sym_eig(&Matrix::identity(4)).unwrap();
        assert_eq!(e.eigenvalues, vec![1.0; 4]);
    }

    #[test]
    fn eig_reconstructs_random_symmetric() {
        let mut rng = RngStream::new(7, 0);
        for _ in 0..20 {
            let a = random_symmetric(5, &mut rng);
            let e = sym_eig(&a).unwrap();
            assert!(rel_frob(&e.reconstruct(), &a) < 1e-10);
            let q = &e.eigenvectors;
            let qtq = q.transpose().matmul(q).unwrap();
            assert!(rel_frob(&qtq, &Matrix::identity(5)) < 1e-10);
            assert!(e.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn eig_rejects_bad_input() {
        let rect = Matrix::zeros(2, 3);
        assert!(matches!(sym_eig(&rect), Err(Error::Shape(_))));
        let asym = Matrix::from_rows(&[[1.0, 2.0], [0.0, 1.0]]).unwrap();
        assert!(matches!(sym_eig(&asym), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn psd_sqrt_cases() {
        let r = psd_sqrt(&Matrix::from_diag(&[4.0, 9.0])).unwrap();
        assert!(rel_frob(&r, &Matrix::from_diag(&[2.0, 3.0])) < 1e-14);
        let i = psd_sqrt(&Matrix::identity(3)).unwrap();
        assert!(rel_frob(&i, &Matrix::identity(3)) < 1e-14);

        let mut rng = RngStream::new(11, 0);
        for _ in 0..10 {
            let a = random_psd(4, &mut rng);
            let r = psd_sqrt(&a).unwrap();
            assert!(rel_frob(&r.matmul(&r).unwrap(), &a) < 1e-9);
        }
    }

    #[test]
    fn psd_sqrt_rejects_indefinite() {
        let a = Matrix::from_diag(&[1.0, -0.5]);
        assert!(matches!(psd_sqrt(&a), Err(Error::NotPsd { .. })));
    }

    #[test]
    fn psd_sqrt_fixes_projectors() {
        let mut rng = RngStream::new(3, 0);
        let raw = random_matrix(5, 2, &mut rng);
        let q = crate::data::orthonormalize_columns(&raw).unwrap();
        let p = q.matmul_t(&q).unwrap();
        assert!(rel_frob(&psd_sqrt(&p).unwrap(), &p) < 1e-9);
    }

    #[test]
    fn rank_cases() {
        let a = Matrix::from_diag(&[1.0, 0.19]);
        assert_eq!(numerical_rank(&a, 0.2).unwrap(), 1);
        assert_eq!(numerical_rank(&Matrix::zeros(3, 3), 0.2).unwrap(), 0);
        assert_eq!(numerical_rank(&Matrix::identity(4), 0.2).unwrap(), 4);
        assert!(numerical_rank(&a, 0.0).is_err());
    }

    #[test]
    fn norms_of_diagonal_and_zero() {
        let a = Matrix::from_diag(&[4.0, 1.0]);
        assert!((spectral_norm(&a) - 4.0).abs() < 1e-14);
        assert!((frobenius_norm(&a) - 17f64.sqrt()).abs() < 1e-14);
        let z = Matrix::zeros(3, 2);
        assert_eq!(spectral_norm(&z), 0.0);
        assert_eq!(frobenius_norm(&z), 0.0);
    }

    fn power_iteration_norm(a: &Matrix) -> f64 {
        let ata = a.gram();
        let mut v = vec![1.0; a.cols()];
        let mut lambda = 0.0;
        for _ in 0..10_000 {
            let w = ata.matvec(&v).unwrap();
            let nw = norm2(&w);
            v = w.iter().map(|x| x / nw).collect();
            let next = nw;
            if (next - lambda).abs() <= 1e-15 * next {
                break;
            }
            lambda = next;
        }
        lambda.sqrt()
    }

    #[test]
    fn spectral_norm_matches_power_iteration() {
        let mut rng = RngStream::new(5, 0);
        for _ in 0..10 {
            let a = random_matrix(3, 3, &mut rng);
            let oracle = power_iteration_norm(&a);
            assert!((spectral_norm(&a) - oracle).abs() < 1e-8 * oracle.max(1.0));
        }
    }

    #[test]
    fn singular_values_of_wide_matrix() {
        let a = Matrix::from_rows(&[[3.0, 0.0, 0.0], [0.0, 0.0, 2.0]]).unwrap();
        let sv = singular_values(&a);
        assert!((sv[0] - 3.0).abs() < 1e-14 && (sv[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn max_eigenvalue_equals_spectral_norm_for_psd() {
        let mut rng = RngStream::new(9, 1);
        for _ in 0..20 {
            let a = random_psd(5, &mut rng);
            let e = sym_eig(&a).unwrap();
            assert!((e.max() - spectral_norm(&a)).abs() < 1e-9 * e.max().max(1.0));
        }
    }

    #[test]
    fn weyl_bounds_hold() {
        let mut rng = RngStream::new(21, 0);
        for _ in 0..100 {
            let a = random_psd(4, &mut rng);
            let b = random_psd(4, &mut rng);
            let ea = sym_eig(&a).unwrap();
            let eb = sym_eig(&b).unwrap();
            let eab = sym_eig(&a.add(&b).unwrap()).unwrap();
            assert!(ea.min() + eb.max() <= eab.max());
            assert!(eab.max() <= ea.max() + eb.max());
        }
    }

    #[test]
    fn solve_matches_product() {
        let mut rng = RngStream::new(2, 2);
        let a = random_matrix(6, 6, &mut rng);
        let x: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
        let b = a.matvec(&x).unwrap();
        let got = solve(&a, &b).unwrap();
        for (g, e) in got.iter().zip(&x) {
            assert!((g - e).abs() < 1e-10);
        }
        assert!(solve(&Matrix::zeros(2, 2), &[1.0, 1.0]).is_err());
    }

    #[test]
    fn gram_is_xtx() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        let g = x.gram();
        assert_eq!(g, x.transpose().matmul(&x).unwrap());
    }
}
