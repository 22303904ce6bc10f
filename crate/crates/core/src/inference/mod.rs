//! Applications of the casewise scores.

pub mod chisq;
pub mod sandwich;
pub mod sctest;
pub mod vuong;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{GlmmError, Result};

/// Relative eigenvalue floor below which a symmetric matrix counts as singular.
pub const EIGEN_TOL: f64 = 1e-10;

/// `M^{-1/2}` of a symmetric positive definite matrix via its eigendecomposition.
pub fn sym_inv_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    sym_power(m, -0.5, what)
}

/// `M^{-1}` of a symmetric positive definite matrix via its eigendecomposition.
pub fn sym_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    sym_power(m, -1.0, what)
}

fn sym_power(m: &DMatrix<f64>, power: f64, what: &str) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.amax();
    let min = eig.eigenvalues.min();
    if min.is_nan() || min <= EIGEN_TOL * max {
        let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        vals.sort_by(f64::total_cmp);
        return Err(GlmmError::Singularity(format!(
            "{what} is not positive definite; eigenvalues {vals:?}"
        )));
    }
    let d = eig.eigenvalues.map(|v| v.powf(power));
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose();
    Ok((&out + out.transpose()) * 0.5)
}
