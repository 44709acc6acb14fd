//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::consts::PSD_TOL;
use crate::error::{Error, Result};

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetrizes a covariance and clips tiny negative eigenvalues.
///
/// Fails if any eigenvalue is below `-PSD_TOL`. A matrix that is already PSD is
/// returned symmetrized but otherwise untouched.
pub fn repair_psd(m: &DMatrix<f64>, name: &str) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::dim(
            format!("{name} (square)"),
            format!("{}x{}", m.nrows(), m.nrows()),
            format!("{}x{}", m.nrows(), m.ncols()),
        ));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("{name} has non-finite entries")));
    }
    let sym = symmetrize(m);
    if sym.nrows() == 0 {
        return Ok(sym);
    }
    let eig = SymmetricEigen::new(sym.clone());
    let min = eig.eigenvalues.min();
    if min < -PSD_TOL {
        return Err(Error::NotPsd {
            name: name.to_string(),
            min_eigenvalue: min,
        });
    }
    if min >= 0.0 {
        return Ok(sym);
    }
    let clipped = eig.eigenvalues.map(|l| l.max(0.0));
    let v = &eig.eigenvectors;
    Ok(symmetrize(&(v * DMatrix::from_diagonal(&clipped) * v.transpose())))
}

/// Symmetric PSD square root via eigendecomposition, clipping eigenvalues at `clip`.
pub fn psd_sqrt(m: &DMatrix<f64>, clip: f64) -> Result<DMatrix<f64>> {
    let sym = symmetrize(m);
    if sym.nrows() == 0 {
        return Ok(sym);
    }
    let eig = SymmetricEigen::new(sym);
    let min = eig.eigenvalues.min();
    if min < -clip {
        return Err(Error::NotPsd {
            name: "square-root argument".into(),
            min_eigenvalue: min,
        });
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    Ok(symmetrize(&(v * DMatrix::from_diagonal(&roots) * v.transpose())))
}

/// Cholesky factorization of the symmetrized matrix.
pub fn spd_factor(m: &DMatrix<f64>, name: &str) -> Result<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite { name: name.into() });
    }
    Cholesky::new(symmetrize(m)).ok_or_else(|| Error::NotPositiveDefinite { name: name.into() })
}

pub fn spd_inverse(m: &DMatrix<f64>, name: &str) -> Result<DMatrix<f64>> {
    Ok(spd_factor(m, name)?.inverse())
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(symmetrize(m)).eigenvalues.min()
}

pub fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repair_clips_tiny_negative_eigenvalues() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -5e-11]);
        let r = repair_psd(&m, "m").unwrap();
        assert!(min_eigenvalue(&r) >= 0.0);
        assert!((r[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn repair_rejects_negative_definite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-6]);
        assert!(matches!(repair_psd(&m, "m"), Err(Error::NotPsd { .. })));
    }

    #[test]
    fn repair_symmetrizes() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 2.0]);
        let r = repair_psd(&m, "m").unwrap();
        assert_eq!(r[(0, 1)], 0.5);
        assert_eq!(r[(1, 0)], 0.5);
    }

    #[test]
    fn sqrt_squares_back() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
        let s = psd_sqrt(&m, 1e-12).unwrap();
        assert!((&s * &s - &m).abs().max() < 1e-12);
    }
}
