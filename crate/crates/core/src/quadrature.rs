//! Gauss–Hermite rules for the standard-normal kernel and their
//! mode-anchored adaptation.
//!
//! One-dimensional rules come from the eigen-decomposition of the Jacobi
//! matrix of the probabilists' Hermite recurrence (Golub–Welsch), polished by
//! Newton steps on the orthonormal recurrence. Nodes and weights are already
//! on the N(0, 1) scale: raw physicists' nodes times sqrt(2), weights over
//! sqrt(pi), so the weights sum to one.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{GlmmError, Result};

pub const MAX_POINTS: usize = 25;
pub const MAX_DIM: usize = 3;

/// Tensor-product Gauss–Hermite rule on the standard-normal kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct GhRule {
    points: usize,
    dim: usize,
    /// Row-major `points^dim x dim` node coordinates.
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

/// Orthonormal Hermite values h_{n-1}(x), h_n(x).
fn hermite_pair(n: usize, x: f64) -> (f64, f64) {
    let mut prev = 0.0;
    let mut cur = 1.0;
    for k in 0..n {
        let next = (x * cur - (k as f64).sqrt() * prev) / ((k + 1) as f64).sqrt();
        prev = cur;
        cur = next;
    }
    (prev, cur)
}

/// One-dimensional rule, nodes ascending.
pub fn gh_rule_1d(points: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(1..=MAX_POINTS).contains(&points) {
        return Err(GlmmError::Config(format!(
            "number of quadrature points must be in 1..={MAX_POINTS}, got {points}"
        )));
    }
    if points == 1 {
        return Ok((vec![0.0], vec![1.0]));
    }
    let jacobi = DMatrix::from_fn(points, points, |r, c| {
        if r + 1 == c {
            (c as f64).sqrt()
        } else if c + 1 == r {
            (r as f64).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .map(|(k, &x)| (x, eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

    let nf = points as f64;
    let mut nodes: Vec<f64> = pairs
        .iter()
        .map(|&(mut x, _)| {
            for _ in 0..3 {
                let (hm1, h) = hermite_pair(points, x);
                let step = h / (nf.sqrt() * hm1);
                if !step.is_finite() {
                    break;
                }
                x -= step;
            }
            x
        })
        .collect();
    // exact symmetry about the origin
    for k in 0..points / 2 {
        let a = 0.5 * (nodes[points - 1 - k] - nodes[k]);
        nodes[k] = -a;
        nodes[points - 1 - k] = a;
    }
    if points % 2 == 1 {
        nodes[points / 2] = 0.0;
    }
    // Christoffel weights 1 / sum_j h_j(x)^2
    let mut weights: Vec<f64> = nodes
        .iter()
        .map(|&x| {
            let mut prev = 0.0;
            let mut cur = 1.0;
            let mut sum = 1.0;
            for k in 0..points - 1 {
                let next = (x * cur - (k as f64).sqrt() * prev) / ((k + 1) as f64).sqrt();
                prev = cur;
                cur = next;
                sum += cur * cur;
            }
            1.0 / sum
        })
        .collect();
    for k in 0..points / 2 {
        let w = 0.5 * (weights[k] + weights[points - 1 - k]);
        weights[k] = w;
        weights[points - 1 - k] = w;
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok((nodes, weights))
}

/// `points` nodes per dimension, tensor-producted over `dim` dimensions.
pub fn gh_rule(points: usize, dim: usize) -> Result<GhRule> {
    if dim == 0 || dim > MAX_DIM {
        return Err(GlmmError::Config(format!(
            "random-effect dimension must be in 1..={MAX_DIM}, got {dim}"
        )));
    }
    let (n1, w1) = gh_rule_1d(points)?;
    let total = points.pow(dim as u32);
    let mut nodes = Vec::with_capacity(total * dim);
    let mut weights = Vec::with_capacity(total);
    for flat in 0..total {
        let mut rem = flat;
        let mut idx = vec![0; dim];
        for d in (0..dim).rev() {
            idx[d] = rem % points;
            rem /= points;
        }
        nodes.extend(idx.iter().map(|&i| n1[i]));
        weights.push(idx.iter().map(|&i| w1[i]).product());
    }
    Ok(GhRule { points, dim, nodes, weights })
}

impl GhRule {
    pub fn points(&self) -> usize {
        self.points
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn node(&self, m: usize) -> &[f64] {
        &self.nodes[m * self.dim..(m + 1) * self.dim]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Rule relocated to one cluster's posterior. Weights are kept on the log
/// scale and already include the prior density at each node.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedRule {
    dim: usize,
    nodes: Vec<f64>,
    log_weights: Vec<f64>,
}

impl AdaptedRule {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn node(&self, m: usize) -> &[f64] {
        &self.nodes[m * self.dim..(m + 1) * self.dim]
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }
}

/// Relocates `rule` to `a* = b + C a` with weights
/// `w (2 pi)^{d/2} det(C) exp(|a|^2 / 2) phi(a* | 0, G)`.
pub fn adapt_rule(
    rule: &GhRule,
    b_tilde: &DVector<f64>,
    c_tilde: &DMatrix<f64>,
    g_hat: &DMatrix<f64>,
) -> Result<AdaptedRule> {
    let d = rule.dim();
    if b_tilde.len() != d || c_tilde.shape() != (d, d) || g_hat.shape() != (d, d) {
        return Err(GlmmError::Shape(format!("adaptation inputs must be {d}-dimensional")));
    }
    let mut log_det_c = 0.0;
    for j in 0..d {
        let c = c_tilde[(j, j)];
        if c <= 0.0 {
            return Err(GlmmError::Singularity(format!(
                "conditional factor has non-positive diagonal entry {c} at {j}"
            )));
        }
        log_det_c += c.ln();
    }
    let chol_g = g_hat.clone().cholesky().ok_or_else(|| {
        GlmmError::Singularity("prior covariance is not positive definite".into())
    })?;
    let lg = chol_g.l();
    let log_det_g: f64 = 2.0 * (0..d).map(|j| lg[(j, j)].ln()).sum::<f64>();
    let identity_prior = g_hat.is_identity(0.0);
    let half_d_log_2pi = 0.5 * d as f64 * (2.0 * PI).ln();

    let mut nodes = Vec::with_capacity(rule.len() * d);
    let mut log_weights = Vec::with_capacity(rule.len());
    let mut a_star = DVector::zeros(d);
    for m in 0..rule.len() {
        let a = rule.node(m);
        for r in 0..d {
            let mut v = b_tilde[r];
            for c in 0..=r {
                v += c_tilde[(r, c)] * a[c];
            }
            a_star[r] = v;
        }
        let quad = if identity_prior {
            a_star.norm_squared()
        } else {
            let z = lg.solve_lower_triangular(&a_star).expect("cholesky factor is nonsingular");
            z.norm_squared()
        };
        let log_phi = -half_d_log_2pi - 0.5 * log_det_g - 0.5 * quad;
        let a_sq: f64 = a.iter().map(|v| v * v).sum();
        log_weights.push(rule.weights()[m].ln() + half_d_log_2pi + log_det_c + 0.5 * a_sq + log_phi);
        nodes.extend(a_star.iter());
    }
    Ok(AdaptedRule { dim: d, nodes, log_weights })
}

/// `sum_m w*_m f(a*_m)`.
pub fn integrate_cluster<F>(integrand: F, adapted: &AdaptedRule) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut total = 0.0;
    for m in 0..adapted.len() {
        let v = integrand(adapted.node(m));
        if !v.is_finite() {
            return Err(GlmmError::NonFinite { node: m });
        }
        total += adapted.log_weights[m].exp() * v;
    }
    Ok(total)
}

/// `log sum_m w*_m exp(log_f(a*_m))`, shifted by the largest term.
pub fn log_integrate_cluster<F>(log_integrand: F, adapted: &AdaptedRule) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let terms = (0..adapted.len())
        .map(|m| {
            let v = log_integrand(adapted.node(m));
            if v.is_nan() || v == f64::INFINITY {
                Err(GlmmError::NonFinite { node: m })
            } else {
                Ok(adapted.log_weights[m] + v)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(log_sum_exp(&terms))
}

pub fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}
