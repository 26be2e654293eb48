//! Small numerical helpers shared across filter implementations.

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Most negative eigenvalue a covariance is allowed to reach through
/// roundoff before it is treated as a genuine numerical failure rather than
/// noise to clamp away.
pub const PSD_EIGEN_TOL: f64 = 1e-10;

/// `log Σ exp(x_i)` with max-subtraction. Returns `-inf` for an all-`-inf`
/// input (zero total mass).
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Symmetrizes a covariance and clamps eigenvalue noise: returns the
/// repaired matrix and whether a negative eigenvalue was clamped to zero.
///
/// The fast path keeps an already-positive-definite matrix untouched apart
/// from symmetrization (checked by Cholesky). Otherwise the matrix is
/// eigendecomposed; eigenvalues in `[-PSD_EIGEN_TOL, 0)` are clamped to
/// zero, while anything more negative is an error — a covariance that far
/// from PSD means the step that produced it is broken, and clamping would
/// hide that.
pub fn clamp_psd(cov: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
    let sym = 0.5 * (cov + cov.transpose());
    if Cholesky::new(sym.clone()).is_some() {
        return Ok((sym, false));
    }
    let eig = SymmetricEigen::new(sym);
    let mut clamped = false;
    let mut vals = eig.eigenvalues;
    for v in vals.iter_mut() {
        if *v < -PSD_EIGEN_TOL {
            return Err(Error::Numerical(format!(
                "covariance has eigenvalue {v:e} below the -{PSD_EIGEN_TOL:e} repair threshold"
            )));
        }
        if *v < 0.0 {
            *v = 0.0;
            clamped = true;
        }
    }
    let q = eig.eigenvectors;
    let rebuilt = &q * DMatrix::from_diagonal(&vals) * q.transpose();
    // Reconstruction reintroduces asymmetry at machine precision.
    Ok((0.5 * (&rebuilt + rebuilt.transpose()), clamped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn logsumexp_is_shift_stable() {
        let xs = [-1000.0, -1000.5, -999.5];
        let shifted: Vec<f64> = xs.iter().map(|x| x + 1000.0).collect();
        assert_abs_diff_eq!(logsumexp(&xs) + 1000.0, logsumexp(&shifted), epsilon = 1e-12);
        assert_eq!(logsumexp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
    }

    #[test]
    fn clamp_psd_paths() {
        // Positive definite: untouched (fast path).
        let pd = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let (m, clamped) = clamp_psd(&pd).unwrap();
        assert!(!clamped);
        assert_abs_diff_eq!(m[(0, 1)], 0.3, epsilon = 1e-15);

        // Eigenvalue noise just below zero: clamped.
        let noisy = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0 - 1e-12]);
        let (m, clamped) = clamp_psd(&noisy).unwrap();
        assert!(clamped);
        assert!(Cholesky::new(m + DMatrix::identity(2, 2) * 1e-14).is_some());

        // Genuinely indefinite: error.
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(clamp_psd(&bad).is_err());
    }
}
