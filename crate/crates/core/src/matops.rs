//! Dense linear algebra for the small symmetric systems that show up in the
//! analysis: Jacobi eigendecomposition, Moore–Penrose pseudo-inverses,
//! spectral norms, Sylvester solves and two perturbation bounds for inverses.
//!
//! Everything here is row-major and dense. Dimensions are at most a few
//! hundred, which is where cyclic Jacobi is both accurate and fast enough.

use std::ops::{Add, Index, IndexMut, Mul, Sub};

use crate::error::{LabError, Result};

/// Default relative threshold below which eigenvalues are treated as zero.
pub const PINV_TOL: f64 = 1e-10;

const JACOBI_MAX_SWEEPS: usize = 100;

/// Dense row-major real matrix.
#[derive(Clone, Debug, PartialEq)]
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
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Builds a matrix from a row-major slice.
    pub fn from_row_slice(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LabError::ShapeMismatch(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            data: data.to_vec(),
        })
    }

    /// Builds a matrix from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            rows: r,
            cols: c,
            data,
        }
    }

    /// `u vᵀ`.
    pub fn outer(u: &[f64], v: &[f64]) -> Self {
        let mut m = Self::zeros(u.len(), v.len());
        for (i, &a) in u.iter().enumerate() {
            for (j, &b) in v.iter().enumerate() {
                m[(i, j)] = a * b;
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec dimension");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn trace(&self) -> f64 {
        self.diag().iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    /// Maximum absolute row sum.
    pub fn inf_norm(&self) -> f64 {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// `‖M − Mᵀ‖∞`.
    pub fn asymmetry(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        (0..self.rows)
            .map(|i| {
                (0..self.cols)
                    .map(|j| (self[(i, j)] - self[(j, i)]).abs())
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
    }

    /// `(M + Mᵀ)/2`.
    pub fn symmetrize(&self) -> Self {
        let mut s = self.clone();
        for i in 0..self.rows {
            for j in 0..i {
                let v = 0.5 * (self[(i, j)] + self[(j, i)]);
                s[(i, j)] = v;
                s[(j, i)] = v;
            }
        }
        s
    }

    fn check_symmetric(&self) -> Result<()> {
        if !self.is_square() {
            return Err(LabError::ShapeMismatch(format!(
                "expected a square matrix, got {}x{}",
                self.rows, self.cols
            )));
        }
        let asym = self.asymmetry();
        if asym > 1e-9 * self.inf_norm().max(f64::MIN_POSITIVE) {
            return Err(LabError::NotSymmetric { asymmetry: asym });
        }
        Ok(())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

impl Mul for &Matrix {
    type Output = Matrix;
    fn mul(self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.rows, "matmul dimension");
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let rrow = rhs.row(k);
                let orow = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, b) in orow.iter_mut().zip(rrow) {
                    *o += a * b;
                }
            }
        }
        out
    }
}

impl Add for &Matrix {
    type Output = Matrix;
    fn add(self, rhs: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect(),
        }
    }
}

impl Sub for &Matrix {
    type Output = Matrix;
    fn sub(self, rhs: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
        }
    }
}

/// Eigendecomposition of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct SymSpectrum {
    /// Eigenvalues in descending order.
    pub eigenvalues: Vec<f64>,
    /// Orthonormal eigenvectors stored as columns, aligned with `eigenvalues`.
    pub eigenvectors: Matrix,
}

impl SymSpectrum {
    /// `V f(Λ) Vᵀ`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let n = self.eigenvalues.len();
        let v = &self.eigenvectors;
        let mut out = Matrix::zeros(n, n);
        for (k, &lam) in self.eigenvalues.iter().enumerate() {
            let w = f(lam);
            if w == 0.0 {
                continue;
            }
            for i in 0..n {
                let vik = v[(i, k)] * w;
                for j in 0..n {
                    out[(i, j)] += vik * v[(j, k)];
                }
            }
        }
        out
    }

    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_with(|l| l)
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(0.0)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues.last().copied().unwrap_or(0.0)
    }
}

/// Full spectrum of a symmetric matrix by cyclic Jacobi rotations.
pub fn sym_eig(m: &Matrix) -> Result<SymSpectrum> {
    m.check_symmetric()?;
    let n = m.rows();
    let mut a = m.symmetrize();
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm();

    let mut converged = n <= 1 || scale == 0.0;
    let mut sweeps = 0;
    while !converged {
        if sweeps >= JACOBI_MAX_SWEEPS {
            return Err(LabError::NoConvergence { iterations: sweeps });
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum::<f64>()
            .sqrt();
        converged = off <= 1e-15 * scale;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let eigenvalues = order.iter().map(|&i| a[(i, i)]).collect();
    let mut eigenvectors = Matrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        // sign convention: first non-negligible component positive
        let sign = (0..n)
            .map(|i| v[(i, src)])
            .find(|x| x.abs() > 1e-12)
            .map_or(1.0, f64::signum);
        for i in 0..n {
            eigenvectors[(i, col)] = sign * v[(i, src)];
        }
    }
    Ok(SymSpectrum {
        eigenvalues,
        eigenvectors,
    })
}

/// Moore–Penrose pseudo-inverse of a symmetric matrix. Eigenvalues with
/// `|λ| ≤ tol·max|λ|` are treated as zero.
pub fn pinv_sym(m: &Matrix, tol: f64) -> Result<Matrix> {
    let spec = sym_eig(m)?;
    let largest = spec.eigenvalues.iter().fold(0.0_f64, |a, l| a.max(l.abs()));
    let cut = tol * largest;
    Ok(spec.reconstruct_with(|l| if l.abs() <= cut || l == 0.0 { 0.0 } else { 1.0 / l }))
}

/// Largest singular value.
pub fn spectral_norm(m: &Matrix) -> Result<f64> {
    if m.rows() == 0 || m.cols() == 0 {
        return Ok(0.0);
    }
    let gram = &m.transpose() * m;
    let spec = sym_eig(&gram.symmetrize())?;
    Ok(spec.max_eigenvalue().max(0.0).sqrt())
}

/// Spectral norm of a symmetric matrix, `max |λ|`.
pub fn spectral_norm_sym(m: &Matrix) -> Result<f64> {
    let spec = sym_eig(m)?;
    Ok(spec.max_eigenvalue().abs().max(spec.min_eigenvalue().abs()))
}

/// LU factorization with partial pivoting.
#[derive(Clone, Debug)]
pub struct Lu {
    lu: Matrix,
    perm: Vec<usize>,
}

impl Lu {
    pub fn new(a: &Matrix) -> Result<Self> {
        if !a.is_square() {
            return Err(LabError::ShapeMismatch("LU of a non-square matrix".into()));
        }
        let n = a.rows();
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let scale = a.max_abs().max(f64::MIN_POSITIVE);
        for k in 0..n {
            let (piv, pval) = (k..n)
                .map(|i| (i, lu[(i, k)].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pval <= 1e-14 * scale {
                return Err(LabError::SingularMatrix);
            }
            if piv != k {
                perm.swap(piv, k);
                for j in 0..n {
                    let tmp = lu[(k, j)];
                    lu[(k, j)] = lu[(piv, j)];
                    lu[(piv, j)] = tmp;
                }
            }
            let d = lu[(k, k)];
            for i in (k + 1)..n {
                let f = lu[(i, k)] / d;
                lu[(i, k)] = f;
                if f != 0.0 {
                    for j in (k + 1)..n {
                        lu[(i, j)] -= f * lu[(k, j)];
                    }
                }
            }
        }
        Ok(Self { lu, perm })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.perm.len();
        assert_eq!(b.len(), n);
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let s: f64 = (0..i).map(|j| self.lu[(i, j)] * x[j]).sum();
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let s: f64 = ((i + 1)..n).map(|j| self.lu[(i, j)] * x[j]).sum();
            x[i] = (x[i] - s) / self.lu[(i, i)];
        }
        x
    }
}

/// Solves `A x = b` for a general square `A`.
pub fn solve(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    Ok(Lu::new(a)?.solve(b))
}

/// Inverse of a general square matrix.
pub fn inverse(a: &Matrix) -> Result<Matrix> {
    let lu = Lu::new(a)?;
    let n = a.rows();
    let mut inv = Matrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[j] = 1.0;
        let col = lu.solve(&e);
        for i in 0..n {
            inv[(i, j)] = col[i];
        }
    }
    Ok(inv)
}

/// Solves `Ā X + X Ā = S` for symmetric positive definite `Ā`, working in
/// the eigenbasis of `Ā` where the solution is `X̃_ij = S̃_ij / (λ_i + λ_j)`.
pub fn sylvester_solve(abar: &Matrix, s: &Matrix) -> Result<Matrix> {
    let spec = sym_eig(abar)?;
    let min = spec.min_eigenvalue();
    if min <= 0.0 {
        return Err(LabError::NotPositiveDefinite {
            min_eigenvalue: min,
        });
    }
    let n = abar.rows();
    if s.rows() != n || s.cols() != n {
        return Err(LabError::ShapeMismatch(format!(
            "right-hand side is {}x{}, expected {n}x{n}",
            s.rows(),
            s.cols()
        )));
    }
    let v = &spec.eigenvectors;
    let vt = v.transpose();
    let mut st = &(&vt * s) * v;
    for i in 0..n {
        for j in 0..n {
            st[(i, j)] /= spec.eigenvalues[i] + spec.eigenvalues[j];
        }
    }
    Ok(&(v * &st) * &vt)
}

/// Leading-order approximation of `(A + tB)⁻¹` for small `t`.
#[derive(Clone, Debug)]
pub struct PinvExpansion {
    /// `(1/t)·(P B P)†` with `P` the projector onto `ker A`.
    pub approx: Matrix,
    /// The exact `(A + tB)⁻¹`.
    pub exact_inverse: Matrix,
    /// `(1/λ⁺_min(A))·(1 + λ_max(B)/λ_min(B))²`; zero when `A = 0`.
    pub residual_bound: f64,
}

impl PinvExpansion {
    /// `‖(A + tB)⁻¹ − approx‖₂`.
    pub fn residual(&self) -> Result<f64> {
        spectral_norm_sym(&(&self.exact_inverse - &self.approx).symmetrize())
    }
}

pub fn projected_pinv_expansion(a: &Matrix, b: &Matrix, t: f64) -> Result<PinvExpansion> {
    if !(t > 0.0) {
        return Err(LabError::InvalidParam(format!("t must be positive, got {t}")));
    }
    let sa = sym_eig(a)?;
    let sb = sym_eig(b)?;
    if a.rows() != b.rows() {
        return Err(LabError::ShapeMismatch("A and B differ in size".into()));
    }
    let a_scale = sa.eigenvalues.iter().fold(0.0_f64, |m, l| m.max(l.abs()));
    let cut = PINV_TOL * a_scale;
    if sa.min_eigenvalue() < -cut.max(1e-14) {
        return Err(LabError::NotPositiveSemidefinite {
            min_eigenvalue: sa.min_eigenvalue(),
        });
    }
    if sb.min_eigenvalue() <= 0.0 {
        return Err(LabError::NotPositiveDefinite {
            min_eigenvalue: sb.min_eigenvalue(),
        });
    }
    let n = a.rows();
    let kernel = sa.reconstruct_with(|l| if l.abs() <= cut || a_scale == 0.0 { 1.0 } else { 0.0 });
    let pbp = &(&kernel * b) * &kernel;
    let approx = pinv_sym(&pbp.symmetrize(), PINV_TOL)?.scale(1.0 / t);

    let sum = a + &b.scale(t);
    let exact_inverse = inverse(&sum).map_err(|_| LabError::SingularMatrix)?;

    let min_positive = sa
        .eigenvalues
        .iter()
        .copied()
        .filter(|&l| l > cut && a_scale > 0.0)
        .fold(f64::INFINITY, f64::min);
    let residual_bound = if min_positive.is_finite() {
        let cond = sb.max_eigenvalue() / sb.min_eigenvalue();
        (1.0 + cond).powi(2) / min_positive
    } else {
        0.0
    };
    debug_assert_eq!(exact_inverse.rows(), n);
    Ok(PinvExpansion {
        approx,
        exact_inverse,
        residual_bound,
    })
}

/// `‖A⁻¹‖₂²·‖B‖₂`, an upper bound on `‖(A + B)⁻¹ − A⁻¹‖₂` for `A ≻ 0`, `B ⪰ 0`.
pub fn inverse_perturbation_bound(a: &Matrix, b: &Matrix) -> Result<f64> {
    let sa = sym_eig(a)?;
    let min = sa.min_eigenvalue();
    if min <= 0.0 {
        return Err(LabError::NotPositiveDefinite {
            min_eigenvalue: min,
        });
    }
    let sb = sym_eig(b)?;
    let scale = sb.max_eigenvalue().abs().max(f64::MIN_POSITIVE);
    if sb.min_eigenvalue() < -1e-12 * scale {
        return Err(LabError::NotPositiveSemidefinite {
            min_eigenvalue: sb.min_eigenvalue(),
        });
    }
    let inv_norm = 1.0 / min;
    let b_norm = sb.max_eigenvalue().max(0.0);
    Ok(inv_norm * inv_norm * b_norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn assert_mat_eq(a: &Matrix, b: &Matrix, tol: f64) {
        assert_eq!((a.rows(), a.cols()), (b.rows(), b.cols()));
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() <= tol, "{a:?}\n!=\n{b:?}");
        }
    }

    #[test]
    fn identity_spectrum() {
        let s = sym_eig(&Matrix::identity(3)).unwrap();
        assert_eq!(s.eigenvalues, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn diagonal_spectrum_is_sorted() {
        let s = sym_eig(&Matrix::from_diag(&[3.0, 1.0, 2.0])).unwrap();
        assert_eq!(s.eigenvalues, vec![3.0, 2.0, 1.0]);
        let expected = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.0, 1.0, 0.0],
        ]);
        assert_mat_eq(&s.eigenvectors, &expected, 0.0);
    }

    #[test]
    fn swap_matrix_spectrum() {
        // characteristic polynomial λ² − 1
        let m = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let s = sym_eig(&m).unwrap();
        assert_abs_diff_eq!(s.eigenvalues[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(s.eigenvalues[1], -1.0, epsilon = 1e-14);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert_abs_diff_eq!(s.eigenvectors[(0, 0)], r, epsilon = 1e-14);
        assert_abs_diff_eq!(s.eigenvectors[(1, 0)], r, epsilon = 1e-14);
        assert_abs_diff_eq!(s.eigenvectors[(0, 1)], r, epsilon = 1e-14);
        assert_abs_diff_eq!(s.eigenvectors[(1, 1)], -r, epsilon = 1e-14);
    }

    #[test]
    fn asymmetric_input_rejected() {
        let m = Matrix::from_rows(&[vec![0.0, 1.0], vec![0.5, 0.0]]);
        assert!(matches!(sym_eig(&m), Err(LabError::NotSymmetric { .. })));
        assert!(matches!(pinv_sym(&m, PINV_TOL), Err(LabError::NotSymmetric { .. })));
    }

    #[test]
    fn pinv_of_singular_diagonal() {
        let p = pinv_sym(&Matrix::from_diag(&[2.0, 0.0]), PINV_TOL).unwrap();
        assert_mat_eq(&p, &Matrix::from_diag(&[0.5, 0.0]), 1e-15);
    }

    #[test]
    fn centering_projector_is_its_own_pinv() {
        let mut c = Matrix::identity(3);
        for i in 0..3 {
            for j in 0..3 {
                c[(i, j)] -= 1.0 / 3.0;
            }
        }
        let p = pinv_sym(&c, PINV_TOL).unwrap();
        assert_mat_eq(&p, &c, 1e-12);
    }

    #[test]
    fn pinv_of_ring_laplacian_step() {
        // I − W for the 4-ring with t = 1/4 has eigenvalues {0, 1/2, 1, 1/2}
        // on the Fourier modes; the pinv inverts the nonzero ones.
        let mut l = Matrix::zeros(4, 4);
        for i in 0..4 {
            l[(i, i)] = 0.5;
            l[(i, (i + 1) % 4)] = -0.25;
            l[((i + 1) % 4, i)] = -0.25;
        }
        let p = pinv_sym(&l, PINV_TOL).unwrap();
        let s = sym_eig(&p).unwrap();
        let expected = [2.0, 2.0, 1.0, 0.0];
        for (a, b) in s.eigenvalues.iter().zip(expected) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
        // the constant vector stays in the kernel
        let ones = p.matvec(&[1.0; 4]);
        assert!(ones.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn sylvester_examples() {
        let x = sylvester_solve(&Matrix::from_diag(&[1.0]), &Matrix::from_diag(&[1.0])).unwrap();
        assert_abs_diff_eq!(x[(0, 0)], 0.5, epsilon = 1e-15);

        let x = sylvester_solve(&Matrix::from_diag(&[1.0, 3.0]), &Matrix::identity(2)).unwrap();
        assert_mat_eq(&x, &Matrix::from_diag(&[0.5, 1.0 / 6.0]), 1e-15);

        let a = Matrix::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]);
        let x = sylvester_solve(&a, &Matrix::zeros(2, 2)).unwrap();
        assert_eq!(x.max_abs(), 0.0);
    }

    #[test]
    fn sylvester_rejects_indefinite() {
        let a = Matrix::from_diag(&[1.0, -1.0]);
        assert!(matches!(
            sylvester_solve(&a, &Matrix::identity(2)),
            Err(LabError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn expansion_two_by_two() {
        let e = projected_pinv_expansion(
            &Matrix::from_diag(&[0.0, 1.0]),
            &Matrix::identity(2),
            0.1,
        )
        .unwrap();
        assert_mat_eq(&e.approx, &Matrix::from_diag(&[10.0, 0.0]), 1e-12);
        assert_abs_diff_eq!(e.residual().unwrap(), 1.0 / 1.1, epsilon = 1e-12);
        assert_abs_diff_eq!(e.residual_bound, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn expansion_degenerate_kernels() {
        let e = projected_pinv_expansion(&Matrix::zeros(2, 2), &Matrix::identity(2), 0.5).unwrap();
        assert_mat_eq(&e.approx, &Matrix::identity(2).scale(2.0), 1e-12);
        assert!(e.residual().unwrap() < 1e-12);

        let e = projected_pinv_expansion(&Matrix::identity(2), &Matrix::identity(2), 0.1).unwrap();
        assert_eq!(e.approx.max_abs(), 0.0);
        assert_abs_diff_eq!(e.residual().unwrap(), 1.0 / 1.1, epsilon = 1e-12);
        assert!(e.residual().unwrap() <= e.residual_bound);
    }

    #[test]
    fn expansion_rejects_bad_inputs() {
        let r = projected_pinv_expansion(&Matrix::from_diag(&[-1.0, 1.0]), &Matrix::identity(2), 0.1);
        assert!(matches!(r, Err(LabError::NotPositiveSemidefinite { .. })));
        let r = projected_pinv_expansion(&Matrix::identity(2), &Matrix::from_diag(&[1.0, 0.0]), 0.1);
        assert!(matches!(r, Err(LabError::NotPositiveDefinite { .. })));
    }

    #[test]
    fn inverse_perturbation_examples() {
        let b = inverse_perturbation_bound(&Matrix::identity(2), &Matrix::identity(2)).unwrap();
        assert_abs_diff_eq!(b, 1.0, epsilon = 1e-15);

        let b = inverse_perturbation_bound(&Matrix::from_diag(&[1.0, 2.0]), &Matrix::zeros(2, 2))
            .unwrap();
        assert_eq!(b, 0.0);

        let a = Matrix::from_diag(&[0.5, 1.0]);
        let p = Matrix::from_diag(&[0.1, 0.0]);
        let bound = inverse_perturbation_bound(&a, &p).unwrap();
        assert_abs_diff_eq!(bound, 0.4, epsilon = 1e-14);
        let diff = &inverse(&(&a + &p)).unwrap() - &inverse(&a).unwrap();
        let actual = spectral_norm(&diff).unwrap();
        assert_abs_diff_eq!(actual, 1.0 / 3.0, epsilon = 1e-12);
        assert!(actual <= bound);

        assert!(inverse_perturbation_bound(&Matrix::from_diag(&[0.0, 1.0]), &p).is_err());
    }

    #[test]
    fn lu_inverse_roundtrip() {
        let a = Matrix::from_rows(&[vec![0.0, 2.0, 1.0], vec![1.0, 1.0, 0.0], vec![3.0, 0.0, 1.0]]);
        let inv = inverse(&a).unwrap();
        assert_mat_eq(&(&a * &inv), &Matrix::identity(3), 1e-14);
        assert_eq!(
            inverse(&Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]])),
            Err(LabError::SingularMatrix)
        );
    }
}
