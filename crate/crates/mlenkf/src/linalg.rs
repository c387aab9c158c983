//! Dense linear algebra for small symmetric matrices.
//!
//! Covariances, gains, and observation operators in this crate are all
//! small (a handful of rows), so everything here is plain dense storage
//! with O(d³) algorithms: a cyclic Jacobi eigensolver, positive
//! semidefinite truncation of the eigenvalue spectrum, and Cholesky
//! solves for SPD systems. The Jacobi method is foolproof for real
//! symmetric matrices and needs no dependencies, which is the right
//! trade at these dimensions.

use crate::error::{Error, Result};

/// Maximum number of full Jacobi sweeps before giving up.
const JACOBI_MAX_SWEEPS: usize = 100;

/// Convergence: off-diagonal Frobenius mass relative to the input norm.
const JACOBI_TOL: f64 = 1e-13;

/// Dense row-major matrix, not necessarily square.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Matrix::zeros(dim, dim);
        for i in 0..dim {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let nrows = rows.len();
        let ncols = if nrows > 0 { rows[0].len() } else { 0 };
        let mut data = Vec::with_capacity(nrows * ncols);
        for r in rows {
            assert_eq!(r.len(), ncols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: nrows,
            cols: ncols,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    /// 1x1 convenience constructor; scalar problems are the common case
    /// in the test models.
    pub fn scalar(value: f64) -> Self {
        Matrix {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
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
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "inner dimensions must agree");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    let v = out.get(i, j) + a * other.get(k, j);
                    out.set(i, j, v);
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "dimension mismatch");
        (0..self.rows)
            .map(|i| (0..self.cols).map(|j| self.get(i, j) * v[j]).sum())
            .collect()
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|a| a * s).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, a| m.max(a.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|a| a.is_finite())
    }
}

/// Symmetric d×d matrix. The storage is a full dense square, but the
/// constructors only ever write mirrored entries, so
/// `get(i, j) == get(j, i)` holds bit-exactly by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "dimension must be at least 1");
        SymMatrix {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::diag(&vec![1.0; dim])
    }

    pub fn diag(entries: &[f64]) -> Self {
        let mut m = SymMatrix::zeros(entries.len());
        for (i, &v) in entries.iter().enumerate() {
            m.data[i * m.dim + i] = v;
        }
        m
    }

    pub fn scalar(value: f64) -> Self {
        SymMatrix {
            dim: 1,
            data: vec![value],
        }
    }

    /// Builds from `f`, evaluated only on the upper triangle (i ≤ j)
    /// and mirrored, so symmetry is exact whatever `f` does.
    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = SymMatrix::zeros(dim);
        for i in 0..dim {
            for j in i..dim {
                let v = f(i, j);
                m.data[i * dim + j] = v;
                m.data[j * dim + i] = v;
            }
        }
        m
    }

    /// Validates exact (bitwise) symmetry of a general matrix.
    pub fn try_from_matrix(m: &Matrix) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::invalid("matrix is not square"));
        }
        for i in 0..m.rows() {
            for j in (i + 1)..m.cols() {
                if m.get(i, j).to_bits() != m.get(j, i).to_bits() {
                    return Err(Error::invalid(format!(
                        "matrix is not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(SymMatrix::from_fn(m.rows(), |i, j| m.get(i, j)))
    }

    /// Symmetrizes a square matrix as (M + Mᵀ)/2.
    pub fn from_average(m: &Matrix) -> Self {
        assert_eq!(m.rows(), m.cols(), "matrix is not square");
        SymMatrix::from_fn(m.rows(), |i, j| 0.5 * (m.get(i, j) + m.get(j, i)))
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    /// Sets the (i, j) and (j, i) entries together.
    pub fn set_sym(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.dim + j] = v;
        self.data[j * self.dim + i] = v;
    }

    pub fn as_scalar(&self) -> f64 {
        assert_eq!(self.dim, 1);
        self.data[0]
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix {
            rows: self.dim,
            cols: self.dim,
            data: self.data.clone(),
        }
    }

    pub fn add(&self, other: &SymMatrix) -> SymMatrix {
        assert_eq!(self.dim, other.dim);
        SymMatrix::from_fn(self.dim, |i, j| self.get(i, j) + other.get(i, j))
    }

    pub fn sub(&self, other: &SymMatrix) -> SymMatrix {
        assert_eq!(self.dim, other.dim);
        SymMatrix::from_fn(self.dim, |i, j| self.get(i, j) - other.get(i, j))
    }

    pub fn scale(&self, s: f64) -> SymMatrix {
        SymMatrix::from_fn(self.dim, |i, j| self.get(i, j) * s)
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, a| m.max(a.abs()))
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|a| a.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&a| a == 0.0)
    }
}

/// Spectral factorization A = Q Λ Qᵀ with eigenvalues sorted in
/// descending order and orthonormal eigenvector columns.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    /// Columns are the eigenvectors, in the order of `eigenvalues`.
    pub eigenvectors: Matrix,
}

impl EigenDecomposition {
    /// Rebuilds Σ λ_k q_k q_kᵀ, optionally keeping only eigenvalues
    /// accepted by `keep`.
    fn reconstruct(&self, keep: impl Fn(f64) -> bool) -> SymMatrix {
        let d = self.eigenvalues.len();
        let q = &self.eigenvectors;
        SymMatrix::from_fn(d, |i, j| {
            let mut acc = 0.0;
            for (k, &lam) in self.eigenvalues.iter().enumerate() {
                if keep(lam) {
                    acc += lam * q.get(i, k) * q.get(j, k);
                }
            }
            acc
        })
    }
}

/// Eigenvalue decomposition of a symmetric matrix by cyclic Jacobi
/// rotations.
///
/// Convergence is declared when the off-diagonal Frobenius mass drops
/// below `1e-13 * ||A||_F`; the sweep count is capped at 100, after
/// which `Error::NoConvergence` is returned (in practice a handful of
/// sweeps suffice for the dimensions used here).
pub fn sym_eigen(a: &SymMatrix) -> Result<EigenDecomposition> {
    if !a.is_finite() {
        return Err(Error::invalid("matrix has non-finite entries"));
    }
    let d = a.dim();
    let mut w = a.to_matrix();
    let mut q = Matrix::identity(d);
    let target = JACOBI_TOL * a.frob_norm();

    let off = |w: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    s += w.get(i, j) * w.get(i, j);
                }
            }
        }
        s.sqrt()
    };

    let mut converged = off(&w) <= target;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if converged {
            break;
        }
        for p in 0..d {
            for r in (p + 1)..d {
                let apr = w.get(p, r);
                if apr == 0.0 {
                    continue;
                }
                // Classical 2x2 rotation annihilating w[p][r].
                let theta = (w.get(r, r) - w.get(p, p)) / (2.0 * apr);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                for k in 0..d {
                    let wkp = w.get(k, p);
                    let wkr = w.get(k, r);
                    w.set(k, p, c * wkp - s * wkr);
                    w.set(k, r, s * wkp + c * wkr);
                }
                for k in 0..d {
                    let wpk = w.get(p, k);
                    let wrk = w.get(r, k);
                    w.set(p, k, c * wpk - s * wrk);
                    w.set(r, k, s * wpk + c * wrk);
                }
                for k in 0..d {
                    let qkp = q.get(k, p);
                    let qkr = q.get(k, r);
                    q.set(k, p, c * qkp - s * qkr);
                    q.set(k, r, s * qkp + c * qkr);
                }
            }
        }
        converged = off(&w) <= target;
    }
    if !converged {
        return Err(Error::NoConvergence(JACOBI_MAX_SWEEPS));
    }

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| w.get(j, j).partial_cmp(&w.get(i, i)).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&k| w.get(k, k)).collect();
    let eigenvectors = Matrix::from_fn(d, d, |i, j| q.get(i, order[j]));
    Ok(EigenDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

/// Projects a symmetric matrix onto its positive-eigenvalue part:
/// Σ_{λ_k > 0} λ_k q_k q_kᵀ.
///
/// When the input is already positive semidefinite it is returned
/// unchanged, so PSD sample covariances never pay for (or drift from)
/// the spectral round trip.
pub fn psd_truncate(a: &SymMatrix) -> Result<SymMatrix> {
    let eig = sym_eigen(a)?;
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return Ok(a.clone());
    }
    Ok(eig.reconstruct(|l| l > 0.0))
}

/// Like [`psd_truncate`] but also reports whether any eigenvalue was
/// dropped.
pub fn psd_truncate_flagged(a: &SymMatrix) -> Result<(SymMatrix, bool)> {
    let eig = sym_eigen(a)?;
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return Ok((a.clone(), false));
    }
    Ok((eig.reconstruct(|l| l > 0.0), true))
}

/// Cholesky factor L (lower triangular) of an SPD matrix.
pub fn spd_chol(s: &SymMatrix) -> Result<Matrix> {
    let d = s.dim();
    let mut l = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..=i {
            let mut sum = s.get(i, j);
            for k in 0..j {
                sum -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if !(sum > 0.0) {
                    return Err(Error::NotSpd(format!("pivot {sum:e} at index {i}")));
                }
                l.set(i, j, sum.sqrt());
            } else {
                l.set(i, j, sum / l.get(j, j));
            }
        }
    }
    Ok(l)
}

/// Solves S X = B for SPD `s` via Cholesky, column by column.
pub fn spd_solve(s: &SymMatrix, b: &Matrix) -> Result<Matrix> {
    if s.dim() != b.rows() {
        return Err(Error::invalid("right-hand side has wrong row count"));
    }
    let l = spd_chol(s)?;
    let d = s.dim();
    let mut x = Matrix::zeros(d, b.cols());
    let mut y = vec![0.0; d];
    for col in 0..b.cols() {
        // forward: L y = b
        for i in 0..d {
            let mut sum = b.get(i, col);
            for k in 0..i {
                sum -= l.get(i, k) * y[k];
            }
            y[i] = sum / l.get(i, i);
        }
        // backward: Lᵀ x = y
        for i in (0..d).rev() {
            let mut sum = y[i];
            for k in (i + 1)..d {
                sum -= l.get(k, i) * x.get(k, col);
            }
            x.set(i, col, sum / l.get(i, i));
        }
    }
    Ok(x)
}

/// Induced 2-norm of a symmetric matrix: max_k |λ_k|.
pub fn spectral_norm(a: &SymMatrix) -> Result<f64> {
    let eig = sym_eigen(a)?;
    Ok(eig.eigenvalues.iter().fold(0.0_f64, |m, &l| m.max(l.abs())))
}

/// Induced 2-norm of a general matrix, via the Gram matrix spectrum.
pub fn operator_norm(a: &Matrix) -> Result<f64> {
    let gram = SymMatrix::from_average(&a.transpose().matmul(a));
    let lam = sym_eigen(&gram)?
        .eigenvalues
        .into_iter()
        .fold(0.0_f64, f64::max);
    Ok(lam.max(0.0).sqrt())
}
