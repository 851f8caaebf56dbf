//! Small dense real linear algebra.
//!
//! Everything here is sized for desk-scale problems (n up to a few hundred):
//! row-major storage, O(n³) factorizations, no blocking.

use std::fmt;
use std::ops::{Add, Index, Mul, Neg, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};

/// Relative asymmetry tolerated before a matrix is rejected as non-symmetric.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Pivots below this fraction of `max|M|` make [`solve_linear`] fail.
pub const SINGULAR_PIVOT_TOL: f64 = 1e-14;
/// Cholesky pivots must exceed this fraction of `trace(M)/n`.
pub const PD_PIVOT_TOL: f64 = 1e-12;

#[derive(Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    /// Builds a vector, rejecting NaN and infinite entries.
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if let Some(index) = entries.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Vector(entries))
    }

    pub fn zeros(n: usize) -> Self {
        Vector(vec![0.0; n])
    }

    pub(crate) fn from_vec(entries: Vec<f64>) -> Self {
        Vector(entries)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    /// Squared Euclidean norm.
    pub fn norm2(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm2().sqrt()
    }

    pub fn scale(&self, s: f64) -> Vector {
        Vector(self.0.iter().map(|v| v * s).collect())
    }

    /// `self + s * other`.
    pub fn axpy(&self, s: f64, other: &Vector) -> Vector {
        debug_assert_eq!(self.len(), other.len());
        Vector(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| a + s * b)
                .collect(),
        )
    }

    pub(crate) fn check_len(&self, n: usize) -> Result<()> {
        if self.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: self.len(),
            });
        }
        Ok(())
    }
}

impl fmt::Debug for Vector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.0.iter()).finish()
    }
}

impl Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl Add for &Vector {
    type Output = Vector;
    fn add(self, rhs: &Vector) -> Vector {
        self.axpy(1.0, rhs)
    }
}

impl Sub for &Vector {
    type Output = Vector;
    fn sub(self, rhs: &Vector) -> Vector {
        self.axpy(-1.0, rhs)
    }
}

impl Neg for &Vector {
    type Output = Vector;
    fn neg(self) -> Vector {
        Vector(self.0.iter().map(|v| -v).collect())
    }
}

impl Mul<&Vector> for f64 {
    type Output = Vector;
    fn mul(self, rhs: &Vector) -> Vector {
        rhs.scale(self)
    }
}

/// Dense square matrix, row-major.
///
/// `symmetric` is a hint set by constructors that produce symmetric results
/// (identity, diagonal, symmetric outer products, explicit symmetrization).
/// Arithmetic between matrices keeps the hint only when both operands carry it.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    n: usize,
    data: Vec<f64>,
    symmetric: bool,
}

impl Matrix {
    /// Builds an `n x n` matrix from row-major data.
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::DimensionMismatch {
                expected: n * n,
                found: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Matrix {
            n,
            data,
            symmetric: false,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for row in rows {
            let row = row.as_ref();
            if row.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Matrix::new(n, data)
    }

    pub fn zeros(n: usize) -> Self {
        Matrix {
            n,
            data: vec![0.0; n * n],
            symmetric: true,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Matrix::zeros(n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    /// `s * u vᵀ`. Symmetric (bitwise) when `u` and `v` are the same vector.
    pub fn outer(s: f64, u: &Vector, v: &Vector) -> Self {
        let n = u.len();
        debug_assert_eq!(n, v.len());
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(s * (u[i] * v[j]));
            }
        }
        Matrix {
            n,
            data,
            symmetric: std::ptr::eq(u, v) || u == v,
        }
    }

    /// In-place `self += s * u vᵀ`.
    pub fn add_outer(&mut self, s: f64, u: &Vector, v: &Vector) {
        let n = self.n;
        debug_assert_eq!(n, u.len());
        for i in 0..n {
            for j in 0..n {
                self.data[i * n + j] += s * (u[i] * v[j]);
            }
        }
        if !(std::ptr::eq(u, v) || u == v) {
            self.symmetric = false;
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
        self.symmetric = false;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn column(&self, j: usize) -> Vector {
        Vector((0..self.n).map(|i| self.get(i, j)).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.n).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn symmetric_flag(&self) -> bool {
        self.symmetric
    }

    /// Sets the symmetry hint after checking it holds within [`SYMMETRY_TOL`].
    pub fn mark_symmetric(mut self) -> Result<Self> {
        let asymmetry = self.max_asymmetry();
        if asymmetry > SYMMETRY_TOL * self.max_abs() {
            return Err(Error::NotSymmetric { asymmetry });
        }
        self.symmetric = true;
        Ok(self)
    }

    pub fn transpose(&self) -> Matrix {
        let n = self.n;
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                data[j * n + i] = self.data[i * n + j];
            }
        }
        Matrix {
            n,
            data,
            symmetric: self.symmetric,
        }
    }

    /// `(M + Mᵀ) / 2`.
    pub fn symmetrize(&self) -> Matrix {
        let n = self.n;
        let mut out = Matrix::zeros(n);
        for i in 0..n {
            out.data[i * n + i] = self.data[i * n + i];
            for j in (i + 1)..n {
                let v = 0.5 * (self.data[i * n + j] + self.data[j * n + i]);
                out.data[i * n + j] = v;
                out.data[j * n + i] = v;
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        let n = self.n;
        debug_assert_eq!(n, other.n);
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    data[i * n + j] += a * other.data[k * n + j];
                }
            }
        }
        Matrix {
            n,
            data,
            symmetric: false,
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            n: self.n,
            data: self.data.iter().map(|v| v * s).collect(),
            symmetric: self.symmetric,
        }
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        debug_assert_eq!(self.n, other.n);
        Matrix {
            n: self.n,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| f(*a, *b))
                .collect(),
            symmetric: self.symmetric && other.symmetric,
        }
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// `vᵀ M v`.
    pub fn quadratic_form(&self, v: &Vector) -> f64 {
        debug_assert_eq!(self.n, v.len());
        (0..self.n)
            .map(|i| {
                v[i] * self
                    .row(i)
                    .iter()
                    .zip(v.iter())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .sum()
    }

    /// `M v` without dimension checking; internal hot path.
    pub(crate) fn apply(&self, v: &Vector) -> Vector {
        Vector(
            (0..self.n)
                .map(|i| self.row(i).iter().zip(v.iter()).map(|(a, b)| a * b).sum())
                .collect(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_dim(&self, n: usize) -> Result<()> {
        if self.n != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: self.n,
            });
        }
        Ok(())
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list()
            .entries((0..self.n).map(|i| self.row(i)))
            .finish()
    }
}

impl Add for &Matrix {
    type Output = Matrix;
    fn add(self, rhs: &Matrix) -> Matrix {
        self.zip_with(rhs, |a, b| a + b)
    }
}

impl Sub for &Matrix {
    type Output = Matrix;
    fn sub(self, rhs: &Matrix) -> Matrix {
        self.zip_with(rhs, |a, b| a - b)
    }
}

/// `M v` with dimension checking.
pub fn mat_vec(m: &Matrix, v: &Vector) -> Result<Vector> {
    v.check_len(m.dim())?;
    Ok(m.apply(v))
}

/// LU factorization with partial pivoting, `P M = L U`.
#[derive(Clone, Debug)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl Lu {
    pub fn factor(m: &Matrix) -> Result<Lu> {
        let n = m.dim();
        let mut lu = m.as_slice().to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let threshold = SINGULAR_PIVOT_TOL * m.max_abs();

        for col in 0..n {
            let (pivot_row, pivot_abs) =
                (col..n)
                    .map(|r| (r, lu[r * n + col].abs()))
                    .fold(
                        (col, -1.0),
                        |best, cur| if cur.1 > best.1 { cur } else { best },
                    );
            if pivot_abs <= threshold || pivot_abs == 0.0 {
                return Err(Error::SingularMatrix {
                    column: col,
                    pivot: pivot_abs,
                });
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
                if factor != 0.0 {
                    for j in (col + 1)..n {
                        lu[r * n + j] -= factor * lu[col * n + j];
                    }
                }
            }
        }
        Ok(Lu { n, lu, perm })
    }

    pub fn solve(&self, b: &Vector) -> Result<Vector> {
        let n = self.n;
        b.check_len(n)?;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.lu[i * n + j] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in (i + 1)..n {
                s -= self.lu[i * n + j] * x[j];
            }
            x[i] = s / self.lu[i * n + i];
        }
        Ok(Vector(x))
    }

    /// Solves `M X = B` column by column.
    pub fn solve_matrix(&self, b: &Matrix) -> Result<Matrix> {
        let n = self.n;
        b.check_dim(n)?;
        let mut data = vec![0.0; n * n];
        for j in 0..n {
            let x = self.solve(&b.column(j))?;
            for i in 0..n {
                data[i * n + j] = x[i];
            }
        }
        Ok(Matrix {
            n,
            data,
            symmetric: false,
        })
    }
}

/// Solves `M x = b` by pivoted LU.
pub fn solve_linear(m: &Matrix, b: &Vector) -> Result<Vector> {
    b.check_len(m.dim())?;
    Lu::factor(m)?.solve(b)
}

/// Cholesky-style test on `(M + Mᵀ)/2`.
///
/// Fails with [`Error::NotSymmetric`] when `M` is asymmetric beyond
/// [`SYMMETRY_TOL`] relative to `max|M|`.
pub fn is_positive_definite(m: &Matrix) -> Result<bool> {
    let n = m.dim();
    let asymmetry = m.max_asymmetry();
    if asymmetry > SYMMETRY_TOL * m.max_abs() {
        return Err(Error::NotSymmetric { asymmetry });
    }
    if n == 0 {
        return Ok(true);
    }
    let trace = m.trace();
    if trace <= 0.0 {
        return Ok(false);
    }
    let threshold = PD_PIVOT_TOL * trace / n as f64;
    let a = m.symmetrize();
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if d <= threshold {
            return Ok(false);
        }
        let djj = d.sqrt();
        l[j * n + j] = djj;
        for i in (j + 1)..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / djj;
        }
    }
    Ok(true)
}

pub(crate) fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Haar-distributed orthogonal matrix drawn from `rng`.
///
/// Gram-Schmidt on the columns of a standard-normal matrix, run twice for
/// orthogonality to machine precision; column signs follow `diag(R) > 0`.
pub(crate) fn random_orthogonal_from<R: Rng>(rng: &mut R, n: usize) -> Matrix {
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    for j in 0..n {
        for _pass in 0..2 {
            for i in 0..j {
                let proj: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
                let (done, rest) = cols.split_at_mut(j);
                for (x, q) in rest[0].iter_mut().zip(&done[i]) {
                    *x -= proj * q;
                }
            }
        }
        let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        for x in cols[j].iter_mut() {
            *x /= norm;
        }
    }
    let mut q = Matrix::zeros(n);
    for (j, col) in cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            q.data[i * n + j] = *v;
        }
    }
    q.symmetric = false;
    q
}

/// Random orthogonal `n x n` matrix, deterministic in `seed`.
pub fn random_orthogonal(n: usize, seed: u64) -> Matrix {
    assert!(n >= 1, "random_orthogonal requires n >= 1");
    random_orthogonal_from(&mut seeded_rng(seed), n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> Vector {
        Vector::new(xs.to_vec()).unwrap()
    }

    #[test]
    fn mat_vec_examples() {
        assert_eq!(
            mat_vec(&Matrix::identity(2), &v(&[3.0, -1.0])).unwrap(),
            v(&[3.0, -1.0])
        );
        assert_eq!(
            mat_vec(&Matrix::diag(&[2.0, 4.0]), &v(&[1.0, 1.0])).unwrap(),
            v(&[2.0, 4.0])
        );
        let perm = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        assert_eq!(mat_vec(&perm, &v(&[5.0, 7.0])).unwrap(), v(&[7.0, 5.0]));
    }

    #[test]
    fn mat_vec_dimension_mismatch() {
        let err = mat_vec(&Matrix::identity(3), &v(&[1.0, 2.0])).unwrap_err();
        assert_eq!(
            err,
            Error::DimensionMismatch {
                expected: 3,
                found: 2
            }
        );
    }

    #[test]
    fn vector_rejects_non_finite() {
        assert!(matches!(
            Vector::new(vec![1.0, f64::NAN]),
            Err(Error::NonFinite { index: 1 })
        ));
        assert!(Matrix::new(1, vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn solve_examples() {
        assert_eq!(
            solve_linear(&Matrix::identity(2), &v(&[2.0, 3.0])).unwrap(),
            v(&[2.0, 3.0])
        );
        assert_eq!(
            solve_linear(&Matrix::diag(&[2.0, 4.0]), &v(&[2.0, 4.0])).unwrap(),
            v(&[1.0, 1.0])
        );

        // A_1 of the diag(2,4) fixture applied to g_1 gives -p_1^CG.
        let a =
            Matrix::from_rows(&[[41.0 / 45.0, 2.0 / 45.0], [-8.0 / 45.0, 49.0 / 45.0]]).unwrap();
        let x = solve_linear(&a, &v(&[-8.0 / 9.0, 4.0 / 9.0])).unwrap();
        assert!((x[0] + 80.0 / 81.0).abs() <= 1e-12);
        assert!((x[1] - 20.0 / 81.0).abs() <= 1e-12);
    }

    #[test]
    fn solve_singular() {
        let m = Matrix::from_rows(&[[1.0, 2.0], [2.0, 4.0]]).unwrap();
        assert!(matches!(
            solve_linear(&m, &v(&[1.0, 1.0])),
            Err(Error::SingularMatrix { .. })
        ));
        assert!(matches!(
            solve_linear(&Matrix::zeros(2), &v(&[1.0, 1.0])),
            Err(Error::SingularMatrix { .. })
        ));
    }

    #[test]
    fn positive_definite_examples() {
        assert!(is_positive_definite(&Matrix::identity(3)).unwrap());
        assert!(!is_positive_definite(&Matrix::diag(&[1.0, -1.0])).unwrap());
        // eigenvalues 1 and 3
        let m = Matrix::from_rows(&[[2.0, 1.0], [1.0, 2.0]]).unwrap();
        assert!(is_positive_definite(&m).unwrap());
        let asym = Matrix::from_rows(&[[1.0, 2.0], [0.0, 1.0]]).unwrap();
        assert!(matches!(
            is_positive_definite(&asym),
            Err(Error::NotSymmetric { .. })
        ));
    }

    #[test]
    fn orthogonal_examples() {
        let q1 = random_orthogonal(1, 99);
        assert_eq!(q1.get(0, 0).abs(), 1.0);

        let q = random_orthogonal(3, 7);
        let defect = &q.transpose().matmul(&q) - &Matrix::identity(3);
        assert!(defect.frobenius() <= 1e-10);

        assert_eq!(random_orthogonal(5, 11), random_orthogonal(5, 11));
        assert_ne!(random_orthogonal(5, 11), random_orthogonal(5, 12));
    }

    #[test]
    fn outer_product_is_bitwise_symmetric() {
        let u = v(&[0.1, -3.7, 2.2]);
        let mut m = Matrix::identity(3).scale(1.3);
        m.add_outer(-0.77, &u, &u);
        assert_eq!(m.max_asymmetry(), 0.0);
        assert!(m.symmetric_flag());
    }
}
