//! Dense linear algebra and seeded randomness shared by every other module.
//!
//! All arithmetic is `f64` with fixed summation order, so identical inputs
//! produce bitwise-identical outputs.

mod eigen;
mod matrix;
mod rng;

pub use eigen::{psd_sqrt, psd_sqrt_trace, symmetric_eigen, NEGATIVE_EIGEN_TOL, SYMMETRY_TOL};
pub use matrix::Matrix;
pub use rng::SeededRng;

use crate::error::{Error, Result};

/// Column means and the sample covariance (divisor `n − 1`) of the rows.
///
/// Two passes: means first, then centered cross products. The covariance is
/// filled from its upper triangle, so it is exactly symmetric.
pub fn mean_and_covariance(rows: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = rows.rows();
    if n < 2 {
        return Err(Error::invalid(format!(
            "covariance needs at least 2 rows, got {n}"
        )));
    }
    let d = rows.cols();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(rows.row(i)) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }

    let mut cov = Matrix::zeros(d, d);
    let mut centered = vec![0.0; d];
    for i in 0..n {
        for ((c, v), m) in centered.iter_mut().zip(rows.row(i)).zip(&mean) {
            *c = v - m;
        }
        for a in 0..d {
            for b in a..d {
                cov[(a, b)] += centered[a] * centered[b];
            }
        }
    }
    let denom = (n - 1) as f64;
    for a in 0..d {
        for b in a..d {
            let v = cov[(a, b)] / denom;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    Ok((mean, cov))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_rows_have_zero_covariance() {
        let m = Matrix::from_rows(&[[1.5, -2.0, 3.0], [1.5, -2.0, 3.0]]).unwrap();
        let (mean, cov) = mean_and_covariance(&m).unwrap();
        assert_eq!(mean, vec![1.5, -2.0, 3.0]);
        assert_eq!(cov, Matrix::zeros(3, 3));
    }

    #[test]
    fn hand_case() {
        let m = Matrix::from_rows(&[[0.0], [2.0]]).unwrap();
        let (mean, cov) = mean_and_covariance(&m).unwrap();
        assert_eq!(mean, vec![1.0]);
        assert_eq!(cov, Matrix::from_rows(&[[2.0]]).unwrap());
    }

    #[test]
    fn single_row_rejected() {
        assert!(mean_and_covariance(&Matrix::zeros(1, 3)).is_err());
    }
}
