//! Casewise log-likelihoods, scores and the finite-difference Hessian.
//!
//! Each cluster's score is a ratio of two integrals over the same adapted
//! rule: the GLM score at `u` weighted by `f(y|u)`, over `f(y|u)`. Both are
//! accumulated in one pass with the weights shifted by their maximum on the
//! log scale.

use nalgebra::{DMatrix, DVector};

use crate::error::{GlmmError, Result};
use crate::estimation::{ClusterKernel, ClusterMode, FittedGlmm};
use crate::family::ScorePath;
use crate::model_data::{covariance_labels, reparameterize_scores, Parameterization, RelCovFactor};
use crate::par;
use crate::quadrature::{gh_rule, AdaptedRule};

/// Casewise score matrix: one row per cluster, one column per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub values: DMatrix<f64>,
    pub labels: Vec<String>,
    pub parameterization: Parameterization,
    pub nagq: usize,
}

impl ScoreMatrix {
    pub fn n_clusters(&self) -> usize {
        self.values.nrows()
    }

    pub fn column_sums(&self) -> DVector<f64> {
        self.values.row_sum().transpose()
    }
}

/// Log marginal likelihood and scores of a single cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterDerivatives {
    pub loglik: f64,
    pub beta: DVector<f64>,
    /// Theta-scale scores, in theta order.
    pub theta: DVector<f64>,
}

/// One pass over the nodes of `adapted`.
///
/// The theta score for the factor entry `(a, b)` integrates
/// `(Z' D^-1 V^-1 (y - mu))_a u_b`, the trace form with a 0/1 selector.
pub fn cluster_derivatives(
    kernel: &ClusterKernel<'_>,
    rel: &RelCovFactor,
    adapted: &AdaptedRule,
    path: ScorePath,
) -> Result<ClusterDerivatives> {
    let block = kernel.block;
    let (p, q) = (block.x.ncols(), block.z.ncols());
    let positions = rel.positions();
    let n_nodes = adapted.len();

    let mut log_terms = Vec::with_capacity(n_nodes);
    let mut grads: Vec<(DVector<f64>, DVector<f64>)> = Vec::with_capacity(n_nodes);
    for m in 0..n_nodes {
        let u = adapted.node(m);
        let eta = kernel.eta(u);
        let mut log_f = 0.0;
        let mut s = DVector::zeros(eta.len());
        for r in 0..eta.len() {
            let t = kernel.family.eta_terms(block.y[r], eta[r], path);
            log_f += t.log_density;
            s[r] = t.score;
        }
        let term = adapted.log_weights()[m] + log_f;
        if term.is_nan() || term == f64::INFINITY {
            return Err(GlmmError::NonFinite { node: m });
        }
        log_terms.push(term);
        let zs = block.z.tr_mul(&s);
        let theta = DVector::from_iterator(positions.len(), positions.iter().map(|&(a, b)| zs[a] * u[b]));
        grads.push((block.x.tr_mul(&s), theta));
    }

    let max = log_terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(GlmmError::NonFinite { node: 0 });
    }
    let mut denom = 0.0;
    let mut beta = DVector::zeros(p);
    let mut theta = DVector::zeros(positions.len());
    for (lt, (gb, gt)) in log_terms.iter().zip(&grads) {
        let w = (lt - max).exp();
        denom += w;
        beta.axpy(w, gb, 1.0);
        theta.axpy(w, gt, 1.0);
    }
    debug_assert_eq!(q, rel.q());
    Ok(ClusterDerivatives { loglik: max + denom.ln(), beta: beta / denom, theta: theta / denom })
}

/// Fixed-effect scores of one cluster.
pub fn score_beta_cluster(fit: &FittedGlmm, cluster: usize, adapted: &AdaptedRule) -> Result<DVector<f64>> {
    Ok(cluster_derivatives(&fit.kernel(cluster), &fit.rel, adapted, ScorePath::Auto)?.beta)
}

/// Theta-scale random-effect scores of one cluster.
pub fn score_theta_cluster(fit: &FittedGlmm, cluster: usize, adapted: &AdaptedRule) -> Result<DVector<f64>> {
    Ok(cluster_derivatives(&fit.kernel(cluster), &fit.rel, adapted, ScorePath::Auto)?.theta)
}

/// Per-cluster derivatives at `(beta, rel)` with rules anchored at `modes`.
pub fn all_cluster_derivatives(
    fit: &FittedGlmm,
    beta: &DVector<f64>,
    rel: &RelCovFactor,
    modes: &[ClusterMode],
    nagq: usize,
    path: ScorePath,
) -> Result<Vec<ClusterDerivatives>> {
    let rule = gh_rule(nagq, fit.data.q())?;
    par::try_map_indexed(fit.data.n_clusters(), |i| {
        let kernel = ClusterKernel::new(fit.data.cluster(i), fit.family, beta, rel.lambda());
        let adapted = kernel.adapted(&rule, &modes[i])?;
        cluster_derivatives(&kernel, rel, &adapted, path)
    })
}

/// Casewise log marginal likelihoods `l_i`.
pub fn llcont(fit: &FittedGlmm, nagq: usize) -> Result<Vec<f64>> {
    crate::estimation::cluster_log_marginals(&fit.beta, &fit.rel, &fit.data, fit.family, &fit.modes, nagq)
}

fn score_labels(fit: &FittedGlmm, ranpar: Parameterization) -> Vec<String> {
    let mut labels: Vec<String> = fit.data.fixed_names().to_vec();
    labels.extend(covariance_labels(fit.data.random_names(), fit.structure(), ranpar));
    labels
}

fn assemble(
    fit: &FittedGlmm,
    rel: &RelCovFactor,
    derivs: &[ClusterDerivatives],
    ranpar: Parameterization,
) -> Result<DMatrix<f64>> {
    let (n, p, k) = (derivs.len(), fit.beta.len(), rel.theta().len());
    let mut theta = DMatrix::zeros(n, k);
    let mut values = DMatrix::zeros(n, p + k);
    for (i, d) in derivs.iter().enumerate() {
        values.view_mut((i, 0), (1, p)).copy_from(&d.beta.transpose());
        theta.row_mut(i).copy_from(&d.theta.transpose());
    }
    let mapped = reparameterize_scores(&theta, rel, ranpar)?;
    values.view_mut((0, p), (n, k)).copy_from(&mapped);
    Ok(values)
}

fn refuse_boundary(fit: &FittedGlmm, ranpar: Parameterization) -> Result<()> {
    if fit.on_boundary() && ranpar != Parameterization::Theta {
        return Err(GlmmError::Singularity(format!(
            "fit is on the boundary of the parameter space; {ranpar}-scale derivatives are undefined, use theta"
        )));
    }
    Ok(())
}

/// Casewise scores on the requested scale.
pub fn estfun(fit: &FittedGlmm, ranpar: Parameterization, nagq: usize) -> Result<ScoreMatrix> {
    estfun_with_path(fit, ranpar, nagq, ScorePath::Auto)
}

/// [`estfun`] with an explicit choice of GLM score route.
pub fn estfun_with_path(
    fit: &FittedGlmm,
    ranpar: Parameterization,
    nagq: usize,
    path: ScorePath,
) -> Result<ScoreMatrix> {
    refuse_boundary(fit, ranpar)?;
    let derivs = all_cluster_derivatives(fit, &fit.beta, &fit.rel, &fit.modes, nagq, path)?;
    Ok(ScoreMatrix {
        values: assemble(fit, &fit.rel, &derivs, ranpar)?,
        labels: score_labels(fit, ranpar),
        parameterization: ranpar,
        nagq,
    })
}

/// Largest absolute theta-scale total score.
pub fn total_gradient_norm(fit: &FittedGlmm, nagq: usize) -> Result<f64> {
    let derivs = all_cluster_derivatives(fit, &fit.beta, &fit.rel, &fit.modes, nagq, ScorePath::Auto)?;
    let mut g = DVector::zeros(fit.n_params());
    for d in &derivs {
        let row: Vec<f64> = d.beta.iter().chain(d.theta.iter()).copied().collect();
        g += DVector::from_vec(row);
    }
    Ok(g.amax())
}

/// Total score at `(beta, params on the ranpar scale)`, with modes re-solved.
fn gradient_at(
    fit: &FittedGlmm,
    x: &[f64],
    ranpar: Parameterization,
    nagq: usize,
) -> Result<DVector<f64>> {
    let p = fit.beta.len();
    let beta = DVector::from_column_slice(&x[..p]);
    let rel = RelCovFactor::from_params(&x[p..], fit.rel.q(), fit.structure(), ranpar)?;
    let modes = par::try_map_indexed(fit.data.n_clusters(), |i| {
        let kernel = ClusterKernel::new(fit.data.cluster(i), fit.family, &beta, rel.lambda());
        kernel.mode(Some(&fit.modes[i].mode), i)
    })?;
    let derivs = all_cluster_derivatives(fit, &beta, &rel, &modes, nagq, ScorePath::Auto)?;
    Ok(assemble(fit, &rel, &derivs, ranpar)?.row_sum().transpose())
}

#[derive(Debug, Clone, PartialEq)]
pub struct HessianResult {
    /// Symmetrized `(H + H') / 2`.
    pub matrix: DMatrix<f64>,
    /// `max |H - H'|` before symmetrization.
    pub asymmetry: f64,
    /// Parameters whose column used a one-sided difference.
    pub one_sided: Vec<bool>,
    pub labels: Vec<String>,
    pub parameterization: Parameterization,
    pub nagq: usize,
}

/// Finite-difference step for a parameter value.
pub fn fd_step(value: f64) -> f64 {
    1e-5f64.max(1e-5 * value.abs())
}

/// Central differences of the analytic total score, modes re-solved at
/// every perturbation. Columns whose perturbation leaves the parameter space
/// fall back to a one-sided difference.
pub fn hessian(fit: &FittedGlmm, ranpar: Parameterization, nagq: usize) -> Result<HessianResult> {
    refuse_boundary(fit, ranpar)?;
    let x0: Vec<f64> = fit.beta.iter().copied().chain(fit.rel.params(ranpar)).collect();
    let n = x0.len();
    let evals = par::map_indexed(2 * n, |e| {
        let (j, sign) = (e / 2, if e % 2 == 0 { 1.0 } else { -1.0 });
        let mut x = x0.clone();
        x[j] += sign * fd_step(x0[j]);
        gradient_at(fit, &x, ranpar, nagq)
    });
    let mut evals = evals.into_iter();
    let mut center: Option<DVector<f64>> = None;
    let mut h = DMatrix::zeros(n, n);
    let mut one_sided = vec![false; n];
    for j in 0..n {
        let step = fd_step(x0[j]);
        let plus = evals.next().expect("two evaluations per parameter");
        let minus = evals.next().expect("two evaluations per parameter");
        let col = match (plus, minus) {
            (Ok(gp), Ok(gm)) => (gp - gm) / (2.0 * step),
            (Err(e), Err(_)) => return Err(e),
            (plus, minus) => {
                if center.is_none() {
                    center = Some(gradient_at(fit, &x0, ranpar, nagq)?);
                }
                let c = center.as_ref().expect("set above");
                one_sided[j] = true;
                match (plus, minus) {
                    (Ok(gp), _) => (gp - c) / step,
                    (_, Ok(gm)) => (c - gm) / step,
                    _ => unreachable!(),
                }
            }
        };
        h.set_column(j, &col);
    }
    let asymmetry = (&h - h.transpose()).amax();
    let matrix = (&h + h.transpose()) * 0.5;
    Ok(HessianResult {
        matrix,
        asymmetry,
        one_sided,
        labels: score_labels(fit, ranpar),
        parameterization: ranpar,
        nagq,
    })
}
