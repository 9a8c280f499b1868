use crate::error::{Error, Result};

use super::Matrix;

const OFF_DIAGONAL_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

/// Symmetry tolerance accepted by [`psd_sqrt`], relative to `max(1, max|m|)`.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Most negative eigenvalue accepted by [`psd_sqrt`], relative to
/// `max(1, largest |eigenvalue|)`. Anything between this and zero is clamped.
pub const NEGATIVE_EIGEN_TOL: f64 = 1e-10;

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns `(eigenvalues, eigenvectors)` with eigenvectors stored as columns,
/// so `m = V diag(λ) Vᵀ`. Iteration stops once the off-diagonal Frobenius norm
/// falls below `1e-12 · ‖m‖_F`.
pub fn symmetric_eigen(m: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = m.rows();
    if n != m.cols() {
        return Err(Error::shape(
            "symmetric_eigen",
            format!("{}x{}", m.rows(), m.cols()),
            "square matrix",
        ));
    }
    let mut a = m.clone();
    a.symmetrize();
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm();
    if scale == 0.0 {
        return Ok((vec![0.0; n], v));
    }

    for _ in 0..MAX_SWEEPS {
        if off_diagonal_norm(&a) <= OFF_DIAGONAL_TOL * scale {
            return Ok(((0..n).map(|i| a[(i, i)]).collect(), v));
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                // signum(0.0) == 1.0, so θ = 0 gives the 45° rotation
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut a, &mut v, p, q, c, s);
            }
        }
    }
    if off_diagonal_norm(&a) <= OFF_DIAGONAL_TOL * scale {
        return Ok(((0..n).map(|i| a[(i, i)]).collect(), v));
    }
    Err(Error::Numerical(format!(
        "Jacobi eigensolver did not converge in {MAX_SWEEPS} sweeps"
    )))
}

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[(i, j)] * a[(i, j)];
            }
        }
    }
    s.sqrt()
}

// Applies the rotation J(p, q, θ) as A ← JᵀAJ and V ← VJ.
fn rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let n = a.rows();
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
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

/// Eigenvalues of a symmetric PSD matrix after validation and clamping.
fn checked_psd_eigen(m: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    if m.rows() != m.cols() {
        return Err(Error::NotPsd(format!("{}x{} is not square", m.rows(), m.cols())));
    }
    let asym = m.asymmetry();
    if asym > SYMMETRY_TOL * m.max_abs().max(1.0) {
        return Err(Error::NotPsd(format!("asymmetry {asym:e} exceeds tolerance")));
    }
    let (mut values, vectors) = symmetric_eigen(m)?;
    let largest = values.iter().fold(1.0_f64, |acc, v| acc.max(v.abs()));
    for v in values.iter_mut() {
        if *v < -NEGATIVE_EIGEN_TOL * largest {
            return Err(Error::NotPsd(format!("eigenvalue {v:e} is negative")));
        }
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok((values, vectors))
}

/// Symmetric square root `S` of a PSD matrix, `S·S = m`.
pub fn psd_sqrt(m: &Matrix) -> Result<Matrix> {
    let (values, vectors) = checked_psd_eigen(m)?;
    let n = m.rows();
    // V diag(√λ) Vᵀ
    let mut scaled = vectors.clone();
    for j in 0..n {
        let r = values[j].sqrt();
        for i in 0..n {
            scaled[(i, j)] *= r;
        }
    }
    let mut s = scaled.matmul_t(&vectors)?;
    s.symmetrize();
    Ok(s)
}

/// `tr(√m)` for PSD `m`, i.e. the sum of square roots of the clamped
/// eigenvalues.
pub fn psd_sqrt_trace(m: &Matrix) -> Result<f64> {
    let (values, _) = checked_psd_eigen(m)?;
    Ok(values.iter().map(|v| v.sqrt()).sum())
}
