//! Small dense linear-algebra helpers shared across modules.
//!
//! Everything here operates on `nalgebra` dynamic matrices at desk scale;
//! no routine is meant for large problems.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// `(M + Mᵀ)/2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigendecomposition of a symmetric matrix; input is symmetrized first.
/// Returns `(eigenvalues, eigenvectors)` with `M = Q diag(λ) Qᵀ`.
pub fn sym_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let se = symmetrize(m).symmetric_eigen();
    (se.eigenvalues, se.eigenvectors)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eig(m: &DMatrix<f64>) -> f64 {
    let (vals, _) = sym_eigen(m);
    vals.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Largest eigenvalue of a symmetric matrix.
pub fn max_eig(m: &DMatrix<f64>) -> f64 {
    let (vals, _) = sym_eigen(m);
    vals.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Eigenvalues sorted descending (λ₁ ≥ … ≥ λ_n).
pub fn sorted_eigenvalues_desc(m: &DMatrix<f64>) -> Vec<f64> {
    let (vals, _) = sym_eigen(m);
    let mut v: Vec<f64> = vals.iter().copied().collect();
    v.sort_by(|a, b| b.partial_cmp(a).unwrap());
    v
}

/// `f(M) = Q diag(f(λ)) Qᵀ` for symmetric `M`.
pub fn sym_matrix_function<F: Fn(f64) -> f64>(m: &DMatrix<f64>, f: F) -> DMatrix<f64> {
    let (vals, q) = sym_eigen(m);
    let d = DMatrix::from_diagonal(&vals.map(f));
    &q * d * q.transpose()
}

/// `(M + λI)^p` for symmetric PSD-intended `M`, with eigenvalues clamped at
/// zero before shifting. Fails if any shifted eigenvalue is ≤ `tol` and the
/// power is negative (the operator would be singular).
pub fn sym_shifted_power(
    m: &DMatrix<f64>,
    lambda: f64,
    p: f64,
    tol: f64,
) -> Result<DMatrix<f64>> {
    let (vals, q) = sym_eigen(m);
    let shifted: Vec<f64> = vals.iter().map(|&v| v.max(0.0) + lambda).collect();
    if p < 0.0 {
        let min = shifted.iter().copied().fold(f64::INFINITY, f64::min);
        if min <= tol {
            return Err(Error::Singular("sym_shifted_power"));
        }
    }
    let d = DMatrix::from_diagonal(&DVector::from_iterator(
        shifted.len(),
        shifted.iter().map(|&v| v.powf(p)),
    ));
    Ok(&q * d * q.transpose())
}

/// Symmetric PSD square root, clamping negative eigenvalues at zero.
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    sym_matrix_function(m, |v| v.max(0.0).sqrt())
}

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse(m: &DMatrix<f64>, context: &'static str) -> Result<DMatrix<f64>> {
    symmetrize(m)
        .cholesky()
        .map(|c| c.inverse())
        .ok_or(Error::NotPositiveDefinite(context))
}

/// Solve `M x = b` by LU; errors if `M` is singular.
pub fn lu_solve(m: &DMatrix<f64>, b: &DVector<f64>, context: &'static str) -> Result<DVector<f64>> {
    m.clone().lu().solve(b).ok_or(Error::Singular(context))
}

/// Solve `M X = B` by LU for a matrix right-hand side.
pub fn lu_solve_mat(
    m: &DMatrix<f64>,
    b: &DMatrix<f64>,
    context: &'static str,
) -> Result<DMatrix<f64>> {
    m.clone().lu().solve(b).ok_or(Error::Singular(context))
}

/// Eigenvalues of `B⁻¹H` for symmetric invertible `B` and SPD `H`, sorted
/// descending. Computed via the similar symmetric matrix `H^{1/2}B⁻¹H^{1/2}`.
pub fn preconditioned_spectrum(b: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<Vec<f64>> {
    let h_sqrt = sym_sqrt(h);
    let b_inv = lu_solve_mat(b, &DMatrix::identity(b.nrows(), b.ncols()), "precond spectrum")?;
    let similar = &h_sqrt * b_inv * &h_sqrt;
    Ok(sorted_eigenvalues_desc(&similar))
}

/// `vec(X)` in column-major order.
pub fn vec_of(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec_of`] for an `n×n` matrix.
pub fn unvec(v: &DVector<f64>, n: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(n, n, v.as_slice())
}

/// The `n²×n²` matrix of the map `X ↦ AX + XAᵀ` acting on `vec(X)`,
/// i.e. `I⊗A + A⊗I`.
pub fn lyapunov_operator(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    eye.kronecker(a) + a.kronecker(&eye)
}

/// Solve `A X + X Aᵀ − shift·X = RHS` via the vectorized `n²×n²` system.
pub fn solve_shifted_lyapunov(
    a: &DMatrix<f64>,
    shift: f64,
    rhs: &DMatrix<f64>,
    context: &'static str,
) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if rhs.nrows() != n || rhs.ncols() != n {
        return Err(Error::dim("solve_shifted_lyapunov", n, rhs.nrows()));
    }
    let mut op = lyapunov_operator(a);
    for i in 0..n * n {
        op[(i, i)] -= shift;
    }
    let x = op
        .lu()
        .solve(&vec_of(rhs))
        .ok_or(Error::Singular(context))?;
    Ok(unvec(&x, n))
}

/// Frobenius-relative error `‖a − b‖_F / ‖b‖_F` (absolute norm if `b = 0`).
pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let denom = b.norm();
    if denom == 0.0 {
        (a - b).norm()
    } else {
        (a - b).norm() / denom
    }
}

/// Render a dense matrix as CSV, row-major, 17 significant digits.
pub fn matrix_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format!("{:.16e}", m[(i, j)]));
        }
        out.push('\n');
    }
    out
}
