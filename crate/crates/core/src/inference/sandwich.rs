//! Huber–White sandwich covariance `A^-1 B A^-1` with `A` the negative
//! Hessian and `B` the sum of cluster score outer products (no small-sample
//! scaling).

use nalgebra::{DMatrix, DVector};

use super::sym_inverse;
use crate::derivatives::{estfun, hessian};
use crate::error::{GlmmError, Result};
use crate::estimation::FittedGlmm;
use crate::model_data::Parameterization;

#[derive(Debug, Clone, PartialEq)]
pub struct SandwichResult {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub robust_se: DVector<f64>,
    /// Square roots of the diagonal of `A^-1`.
    pub model_se: DVector<f64>,
    pub labels: Vec<String>,
    pub parameterization: Parameterization,
    pub nagq: usize,
}

/// `V = A^-1 B A^-1` and `A^-1`.
pub fn sandwich_from_parts(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if a.shape() != b.shape() || !a.is_square() {
        return Err(GlmmError::Shape("bread and meat must be square and of equal size".into()));
    }
    let a_inv = sym_inverse(a, "negative Hessian")?;
    let v = &a_inv * b * &a_inv;
    Ok(((&v + v.transpose()) * 0.5, a_inv))
}

fn sqrt_diag(m: &DMatrix<f64>) -> DVector<f64> {
    m.diagonal().map(|v| v.max(0.0).sqrt())
}

pub fn sandwich_vcov(fit: &FittedGlmm, ranpar: Parameterization, nagq: usize) -> Result<SandwichResult> {
    let n = fit.n_params();
    if fit.data.n_clusters() <= n {
        return Err(GlmmError::Config(format!(
            "{} clusters are too few for {n} parameters",
            fit.data.n_clusters()
        )));
    }
    let scores = estfun(fit, ranpar, nagq)?;
    let h = hessian(fit, ranpar, nagq)?;
    let a = -h.matrix;
    let b = scores.values.tr_mul(&scores.values);
    let (v, a_inv) = sandwich_from_parts(&a, &b)?;
    Ok(SandwichResult {
        robust_se: sqrt_diag(&v),
        model_se: sqrt_diag(&a_inv),
        a,
        b,
        v,
        labels: scores.labels,
        parameterization: ranpar,
        nagq,
    })
}
