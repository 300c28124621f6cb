//! Small dense linear-algebra helpers shared by the filter and Riccati code.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= tol * (1.0 + m.amax())
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// 2-norm condition number estimate from the singular values.
pub fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solves `s · X = rhs` for symmetric positive definite `s` through a
/// Cholesky factorisation.
pub fn solve_spd(s: &DMatrix<f64>, rhs: &DMatrix<f64>, context: &'static str) -> Result<DMatrix<f64>> {
    match symmetrize(s).cholesky() {
        Some(chol) => Ok(chol.solve(rhs)),
        None => Err(Error::Singular {
            context,
            condition: condition_estimate(s),
        }),
    }
}

/// Returns `L` with `L·Lᵀ = m` for a symmetric positive semi-definite `m`.
///
/// Uses Cholesky when `m` is positive definite and falls back to an
/// eigendecomposition with clipped eigenvalues for singular matrices.
pub fn psd_factor(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::invalid("covariance must be square"));
    }
    if !is_symmetric(m, 1e-9) {
        return Err(Error::invalid("covariance must be symmetric"));
    }
    if let Some(chol) = m.clone().cholesky() {
        return Ok(chol.l());
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let scale = 1.0 + m.amax();
    if eig.eigenvalues.iter().any(|&v| v < -1e-9 * scale) {
        return Err(Error::invalid("covariance must be positive semi-definite"));
    }
    let sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * sqrt)
}

/// Draws `factor · z` with `z ~ N(0, I)`.
pub fn gaussian<R: Rng + ?Sized>(factor: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let z = DVector::from_fn(factor.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
    factor * z
}

/// Rank with a relative singular-value threshold.
pub fn rank(m: &DMatrix<f64>) -> usize {
    let sv = m.clone().singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    let tol = max * 1e-10 * m.nrows().max(m.ncols()) as f64;
    sv.iter().filter(|&&v| v > tol).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_of_singular_psd() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.0, 1.0]));
        let l = psd_factor(&m).unwrap();
        assert!((&l * l.transpose() - &m).amax() < 1e-12);
        assert!(psd_factor(&DMatrix::zeros(3, 3)).unwrap().amax() == 0.0);
    }

    #[test]
    fn factor_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(psd_factor(&m).is_err());
    }

    #[test]
    fn singular_solve_reports_condition() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        match solve_spd(&s, &DMatrix::identity(2, 2), "test") {
            Err(Error::Singular { condition, .. }) => assert!(condition > 1e12),
            other => panic!("expected singular error, got {other:?}"),
        }
    }
}
