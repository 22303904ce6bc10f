//! Vuong tests comparing two models fitted to the same clusters.
//!
//! Null distributions are weighted chi-square sums whose weights are the
//! eigenvalues of `W = E B A^-1` with `B` the joint score cross-product of
//! both models, `A = diag(A_1, A_2)` their observed informations and
//! `E = diag(-I, I)`. These equal the eigenvalues of the symmetric matrix
//! `B^{1/2} diag(-A_1^-1, A_2^-1) B^{1/2}`.

use nalgebra::{DMatrix, SymmetricEigen};
use statrs::distribution::{ContinuousCDF, Normal};

use super::chisq::weighted_chisq_sf;
use super::sym_inverse;
use crate::derivatives::{estfun, hessian, llcont};
use crate::error::{GlmmError, Result};
use crate::estimation::FittedGlmm;
use crate::model_data::Parameterization;

/// Eigenvalues with magnitude below this (relative to the largest) are dropped.
pub const WEIGHT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct VuongVarianceResult {
    /// Variance of the casewise log-likelihood differences (divisor `I`).
    pub omega2: f64,
    /// `I * omega2`.
    pub statistic: f64,
    pub p_value: f64,
    /// Eigenvalues of `W`; the null is `sum lambda_j^2 chi2_1`.
    pub eigenvalues: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VuongLrResult {
    /// `sum_i (l_i^A - l_i^B)`.
    pub loglik_ratio: f64,
    pub nested: bool,
    /// `2 * loglik_ratio` when nested, otherwise the standardized ratio.
    pub statistic: f64,
    /// Nested: `P(null >= statistic)`. Non-nested: evidence for model A, `1 - Phi(z)`.
    pub p_value: f64,
    /// Non-nested only: evidence for model B, `Phi(z)`.
    pub p_value_b: Option<f64>,
    pub eigenvalues: Vec<f64>,
}

fn check_same_clusters(a: &FittedGlmm, b: &FittedGlmm) -> Result<()> {
    if a.data.cluster_labels() != b.data.cluster_labels() || a.data.cluster_sizes() != b.data.cluster_sizes() {
        return Err(GlmmError::Config("models must be fitted to the same clusters".into()));
    }
    Ok(())
}

fn casewise_differences(a: &FittedGlmm, b: &FittedGlmm, nagq: usize) -> Result<Vec<f64>> {
    check_same_clusters(a, b)?;
    let la = llcont(a, nagq)?;
    let lb = llcont(b, nagq)?;
    Ok(la.iter().zip(&lb).map(|(x, y)| x - y).collect())
}

fn population_variance(d: &[f64]) -> f64 {
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// Eigenvalues of `W` from the score matrices and observed informations of
/// both models, sorted by decreasing magnitude with the numerical tail removed.
pub fn vuong_eigenvalues(
    scores_a: &DMatrix<f64>,
    info_a: &DMatrix<f64>,
    scores_b: &DMatrix<f64>,
    info_b: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    if scores_a.nrows() != scores_b.nrows() {
        return Err(GlmmError::Shape("score matrices have different numbers of clusters".into()));
    }
    let (pa, pb) = (scores_a.ncols(), scores_b.ncols());
    let ia = sym_inverse(info_a, "information of model A")?;
    let ib = sym_inverse(info_b, "information of model B")?;
    let mut s = DMatrix::zeros(scores_a.nrows(), pa + pb);
    s.columns_mut(0, pa).copy_from(scores_a);
    s.columns_mut(pa, pb).copy_from(scores_b);
    let joint = SymmetricEigen::new(s.tr_mul(&s));
    let root = &joint.eigenvectors
        * DMatrix::from_diagonal(&joint.eigenvalues.map(|v| v.max(0.0).sqrt()))
        * joint.eigenvectors.transpose();
    let mut q = DMatrix::zeros(pa + pb, pa + pb);
    q.view_mut((0, 0), (pa, pa)).copy_from(&(-ia));
    q.view_mut((pa, pa), (pb, pb)).copy_from(&ib);
    let k = &root * q * &root;
    let k = (&k + k.transpose()) * 0.5;
    let mut eig: Vec<f64> = SymmetricEigen::new(k).eigenvalues.iter().copied().collect();
    eig.sort_by(|a, b| b.abs().total_cmp(&a.abs()));
    let top = eig.first().map_or(0.0, |v| v.abs());
    eig.retain(|v| v.abs() > WEIGHT_TOL * top.max(1.0));
    Ok(eig)
}

fn model_eigenvalues(a: &FittedGlmm, b: &FittedGlmm, nagq: usize) -> Result<Vec<f64>> {
    let ranpar = Parameterization::Theta;
    let sa = estfun(a, ranpar, nagq)?;
    let sb = estfun(b, ranpar, nagq)?;
    let ha = hessian(a, ranpar, nagq)?;
    let hb = hessian(b, ranpar, nagq)?;
    vuong_eigenvalues(&sa.values, &(-ha.matrix), &sb.values, &(-hb.matrix))
}

/// Tests whether two models are distinguishable (`omega^2 = 0`).
pub fn vuong_variance_test(a: &FittedGlmm, b: &FittedGlmm, nagq: usize) -> Result<VuongVarianceResult> {
    let d = casewise_differences(a, b, nagq)?;
    let omega2 = population_variance(&d);
    let statistic = d.len() as f64 * omega2;
    let eigenvalues = model_eigenvalues(a, b, nagq)?;
    let squares: Vec<f64> = eigenvalues.iter().map(|v| v * v).collect();
    let p_value = if statistic == 0.0 { 1.0 } else { weighted_chisq_sf(statistic, &squares) };
    Ok(VuongVarianceResult { omega2, statistic, p_value, eigenvalues })
}

/// Likelihood ratio test. With `nested`, model A must contain model B and the
/// null is `sum (-lambda_j) chi2_1`; otherwise the ratio is standardized by
/// `omega` and referred to the normal distribution.
pub fn vuong_lr_test(a: &FittedGlmm, b: &FittedGlmm, nested: bool, nagq: usize) -> Result<VuongLrResult> {
    let d = casewise_differences(a, b, nagq)?;
    let loglik_ratio: f64 = d.iter().sum();
    if nested {
        let eigenvalues = model_eigenvalues(a, b, nagq)?;
        let weights: Vec<f64> = eigenvalues.iter().map(|v| -v).collect();
        let statistic = 2.0 * loglik_ratio;
        return Ok(VuongLrResult {
            loglik_ratio,
            nested,
            statistic,
            p_value: weighted_chisq_sf(statistic, &weights),
            p_value_b: None,
            eigenvalues,
        });
    }
    let omega2 = population_variance(&d);
    if omega2 <= 0.0 {
        return Err(GlmmError::Degenerate(
            "casewise log-likelihoods are identical; the standardized ratio is undefined".into(),
        ));
    }
    let z = loglik_ratio / (d.len() as f64 * omega2).sqrt();
    let normal = Normal::standard();
    Ok(VuongLrResult {
        loglik_ratio,
        nested,
        statistic: z,
        p_value: normal.sf(z),
        p_value_b: Some(normal.cdf(z)),
        eigenvalues: Vec::new(),
    })
}
