//! Conditional modes, the adaptive-quadrature marginal likelihood, and the
//! outer derivative-free fit.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{GlmmError, Result};
use crate::family::{FamilySpec, ScorePath};
use crate::model_data::{
    theta_len, theta_positions, ClusterBlock, GlmmData, Parameterization, RandomStructure,
    RelCovFactor,
};
use crate::optim::{self, NelderMeadOptions};
use crate::par;
use crate::quadrature::{adapt_rule, gh_rule, log_integrate_cluster, AdaptedRule, GhRule};

/// Penalized gradient norm at which the inner Newton iteration stops.
pub const MODE_TOL: f64 = 1e-10;
pub const MODE_MAX_ITER: usize = 200;
/// Default quadrature points for post-estimation derivatives.
pub const DEFAULT_DERIVATIVE_NAGQ: usize = 5;
/// Diagonal theta entries closer than this to zero flag a boundary fit.
pub const BOUNDARY_TOL: f64 = 1e-6;

/// Default quadrature points for estimation: 7 for a scalar random effect,
/// Laplace otherwise.
pub fn default_fit_nagq(q: usize) -> usize {
    if q == 1 {
        7
    } else {
        1
    }
}

/// Posterior mode of one cluster's spherical random effects and the
/// Cholesky factor of the inverse penalized curvature there.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterMode {
    pub mode: DVector<f64>,
    pub chol: DMatrix<f64>,
    pub iterations: usize,
}

/// One cluster's linear predictor at fixed `(beta, Lambda)`:
/// `eta(u) = X beta + Z Lambda u`.
#[derive(Debug, Clone)]
pub struct ClusterKernel<'a> {
    pub block: &'a ClusterBlock,
    pub family: FamilySpec,
    pub offset: DVector<f64>,
    pub zl: DMatrix<f64>,
}

impl<'a> ClusterKernel<'a> {
    pub fn new(
        block: &'a ClusterBlock,
        family: FamilySpec,
        beta: &DVector<f64>,
        lambda: &DMatrix<f64>,
    ) -> Self {
        Self { block, family, offset: &block.x * beta, zl: &block.z * lambda }
    }

    pub fn eta(&self, u: &[f64]) -> DVector<f64> {
        let mut eta = self.offset.clone();
        for (k, uk) in u.iter().enumerate() {
            eta.axpy(*uk, &self.zl.column(k), 1.0);
        }
        eta
    }

    /// `log f(y | u)`.
    pub fn log_density(&self, u: &[f64]) -> f64 {
        let eta = self.eta(u);
        (0..eta.len())
            .map(|r| self.family.eta_terms(self.block.y[r], eta[r], ScorePath::Auto).log_density)
            .sum()
    }

    /// Penalized objective `log f(y|u) - |u|^2/2`, its gradient and negative Hessian.
    fn penalized(&self, u: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
        let q = u.len();
        let eta = self.eta(u.as_slice());
        let mut obj = -0.5 * u.norm_squared();
        let mut grad = -u.clone();
        let mut hess = DMatrix::identity(q, q);
        for r in 0..eta.len() {
            let t = self.family.eta_terms(self.block.y[r], eta[r], ScorePath::Auto);
            obj += t.log_density;
            let row = self.zl.row(r);
            for a in 0..q {
                grad[a] += row[a] * t.score;
                for b in 0..=a {
                    hess[(a, b)] += t.weight * row[a] * row[b];
                }
            }
        }
        for a in 0..q {
            for b in 0..a {
                hess[(b, a)] = hess[(a, b)];
            }
        }
        (obj, grad, hess)
    }

    /// Newton iteration with step halving for the posterior mode.
    pub fn mode(&self, warm: Option<&DVector<f64>>, cluster: usize) -> Result<ClusterMode> {
        let q = self.zl.ncols();
        let mut u = match warm {
            Some(w) if w.len() == q && w.iter().all(|v| v.is_finite()) => w.clone(),
            _ => DVector::zeros(q),
        };
        let (mut obj, mut grad, mut hess) = self.penalized(&u);
        if !obj.is_finite() {
            u = DVector::zeros(q);
            (obj, grad, hess) = self.penalized(&u);
        }
        let fail = |reason: String| GlmmError::Estimation { cluster, reason };
        let mut iterations = 0;
        while grad.norm() >= MODE_TOL {
            if iterations == MODE_MAX_ITER {
                return Err(fail(format!(
                    "conditional mode not found in {MODE_MAX_ITER} iterations (gradient norm {:e})",
                    grad.norm()
                )));
            }
            iterations += 1;
            let delta = hess
                .clone()
                .cholesky()
                .ok_or_else(|| fail("penalized curvature not positive definite".into()))?
                .solve(&grad);
            let mut step = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let cand = &u + &delta * step;
                let (o, g, h) = self.penalized(&cand);
                if o.is_finite() && o >= obj - 1e-13 * (1.0 + obj.abs()) {
                    (u, obj, grad, hess) = (cand, o, g, h);
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                // no representable ascent left; accept if already numerically flat
                if grad.norm() < 1e-7 {
                    break;
                }
                return Err(fail(format!("step halving failed (gradient norm {:e})", grad.norm())));
            }
        }
        let cov = hess
            .cholesky()
            .ok_or_else(|| fail("penalized curvature not positive definite".into()))?
            .inverse();
        let chol = cov
            .cholesky()
            .ok_or_else(|| fail("conditional covariance not positive definite".into()))?
            .l();
        Ok(ClusterMode { mode: u, chol, iterations })
    }

    /// The quadrature rule anchored at `mode` (prior covariance is the identity
    /// on the spherical scale).
    pub fn adapted(&self, rule: &GhRule, mode: &ClusterMode) -> Result<AdaptedRule> {
        let q = mode.mode.len();
        adapt_rule(rule, &mode.mode, &mode.chol, &DMatrix::identity(q, q))
    }

    /// `log integral f(y|u) phi(u) du` by the rule anchored at `mode`.
    pub fn log_marginal(&self, rule: &GhRule, mode: &ClusterMode) -> Result<f64> {
        let adapted = self.adapted(rule, mode)?;
        log_integrate_cluster(|u| self.log_density(u), &adapted)
    }
}

fn check_inputs(
    beta: &DVector<f64>,
    rel: &RelCovFactor,
    data: &GlmmData,
    family: FamilySpec,
) -> Result<()> {
    if beta.len() != data.p() {
        return Err(GlmmError::Config(format!(
            "beta has length {}, design has {} columns",
            beta.len(),
            data.p()
        )));
    }
    if rel.q() != data.q() {
        return Err(GlmmError::Config(format!(
            "covariance factor is {0}x{0}, random design has {1} columns",
            rel.q(),
            data.q()
        )));
    }
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(GlmmError::Domain("non-finite fixed effect".into()));
    }
    check_responses(data, family)
}

/// Every response must lie in the family's support.
pub fn check_responses(data: &GlmmData, family: FamilySpec) -> Result<()> {
    for block in data.clusters() {
        for (r, y) in block.y.iter().enumerate() {
            family.check_response(*y).map_err(|e| match e {
                GlmmError::Domain(m) => GlmmError::Domain(format!("row {}: {m}", block.rows[r])),
                other => other,
            })?;
        }
    }
    Ok(())
}

fn modes_with(
    beta: &DVector<f64>,
    rel: &RelCovFactor,
    data: &GlmmData,
    family: FamilySpec,
    warm: Option<&[ClusterMode]>,
) -> Result<Vec<ClusterMode>> {
    par::try_map_indexed(data.n_clusters(), |i| {
        let kernel = ClusterKernel::new(data.cluster(i), family, beta, rel.lambda());
        kernel.mode(warm.map(|w| &w[i].mode), i)
    })
}

/// Posterior modes and conditional factors for every cluster.
pub fn conditional_modes(
    beta: &DVector<f64>,
    rel: &RelCovFactor,
    data: &GlmmData,
    family: FamilySpec,
) -> Result<Vec<ClusterMode>> {
    check_inputs(beta, rel, data, family)?;
    modes_with(beta, rel, data, family, None)
}

/// Per-cluster log marginal likelihoods with rules anchored at `modes`.
pub fn cluster_log_marginals(
    beta: &DVector<f64>,
    rel: &RelCovFactor,
    data: &GlmmData,
    family: FamilySpec,
    modes: &[ClusterMode],
    nagq: usize,
) -> Result<Vec<f64>> {
    let rule = gh_rule(nagq, data.q())?;
    par::try_map_indexed(data.n_clusters(), |i| {
        ClusterKernel::new(data.cluster(i), family, beta, rel.lambda()).log_marginal(&rule, &modes[i])
    })
}

/// Marginal log-likelihood with rules anchored at freshly computed modes.
pub fn marginal_loglik(
    beta: &DVector<f64>,
    rel: &RelCovFactor,
    data: &GlmmData,
    family: FamilySpec,
    nagq: usize,
) -> Result<f64> {
    let modes = conditional_modes(beta, rel, data, family)?;
    Ok(cluster_log_marginals(beta, rel, data, family, &modes, nagq)?.iter().sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Convergence {
    /// False for fits rehydrated from supplied estimates.
    pub optimized: bool,
    pub converged: bool,
    pub evaluations: usize,
    pub restarts: usize,
    /// Largest absolute total score (theta scale) at the estimate.
    pub gradient_norm: f64,
    /// Some diagonal theta entry is within [`BOUNDARY_TOL`] of zero.
    pub boundary: bool,
}

#[derive(Debug, Clone)]
pub struct FittedGlmm {
    pub beta: DVector<f64>,
    pub rel: RelCovFactor,
    pub family: FamilySpec,
    pub data: Arc<GlmmData>,
    pub modes: Vec<ClusterMode>,
    pub loglik: f64,
    /// Quadrature points used for `loglik`.
    pub nagq: usize,
    pub convergence: Convergence,
}

impl FittedGlmm {
    pub fn theta(&self) -> &[f64] {
        self.rel.theta()
    }

    pub fn structure(&self) -> RandomStructure {
        self.rel.structure()
    }

    /// `p + k`.
    pub fn n_params(&self) -> usize {
        self.beta.len() + self.rel.theta().len()
    }

    /// `(beta, theta)` stacked.
    pub fn params(&self) -> Vec<f64> {
        self.beta.iter().chain(self.rel.theta()).copied().collect()
    }

    pub fn on_boundary(&self) -> bool {
        self.convergence.boundary
    }

    pub fn kernel(&self, cluster: usize) -> ClusterKernel<'_> {
        ClusterKernel::new(self.data.cluster(cluster), self.family, &self.beta, self.rel.lambda())
    }
}

fn is_boundary(rel: &RelCovFactor) -> bool {
    (0..rel.q()).any(|j| rel.lambda()[(j, j)].abs() < BOUNDARY_TOL)
}

/// Rebuilds a fit at supplied estimates: modes, conditional factors and
/// log-likelihood are recomputed, nothing is optimized.
pub fn load_fitted(
    beta: &[f64],
    theta: &[f64],
    structure: RandomStructure,
    data: Arc<GlmmData>,
    family: FamilySpec,
    nagq: usize,
) -> Result<FittedGlmm> {
    let q = data.q();
    if beta.len() != data.p() {
        return Err(GlmmError::Config(format!(
            "beta has length {}, expected {}",
            beta.len(),
            data.p()
        )));
    }
    if theta.len() != theta_len(q, structure) {
        return Err(GlmmError::Config(format!(
            "theta has length {}, expected {}",
            theta.len(),
            theta_len(q, structure)
        )));
    }
    let beta = DVector::from_column_slice(beta);
    let rel = RelCovFactor::from_params(theta, q, structure, Parameterization::Theta).map_err(|e| match e {
        GlmmError::Shape(m) | GlmmError::Domain(m) => GlmmError::Config(m),
        other => other,
    })?;
    let modes = conditional_modes(&beta, &rel, &data, family)?;
    let loglik = cluster_log_marginals(&beta, &rel, &data, family, &modes, nagq)?.iter().sum();
    let boundary = is_boundary(&rel);
    let mut fit = FittedGlmm {
        beta,
        rel,
        family,
        data,
        modes,
        loglik,
        nagq,
        convergence: Convergence {
            optimized: false,
            converged: true,
            evaluations: 0,
            restarts: 0,
            gradient_norm: f64::NAN,
            boundary,
        },
    };
    fit.convergence.gradient_norm = crate::derivatives::total_gradient_norm(&fit, nagq)?;
    Ok(fit)
}

#[derive(Debug, Clone, Default)]
pub struct FitControl {
    /// Quadrature points; `None` picks [`default_fit_nagq`].
    pub nagq: Option<usize>,
    pub start_beta: Option<Vec<f64>>,
    pub start_theta: Option<Vec<f64>>,
    pub optimizer: NelderMeadOptions,
}

/// Fixed-effects-only GLM by Newton's method, used for starting values.
pub fn glm_start(data: &GlmmData, family: FamilySpec) -> Vec<f64> {
    let p = data.p();
    let loglik_grad = |beta: &DVector<f64>| {
        let mut ll = 0.0;
        let mut grad = DVector::zeros(p);
        let mut info = DMatrix::zeros(p, p);
        for block in data.clusters() {
            let eta = &block.x * beta;
            for r in 0..eta.len() {
                let t = family.eta_terms(block.y[r], eta[r], ScorePath::Auto);
                ll += t.log_density;
                let x = block.x.row(r).transpose();
                grad.axpy(t.score, &x, 1.0);
                info.ger(t.weight, &x, &x, 1.0);
            }
        }
        (ll, grad, info)
    };
    let mut beta = DVector::zeros(p);
    let (mut ll, mut grad, mut info) = loglik_grad(&beta);
    for _ in 0..50 {
        let ridge = DMatrix::identity(p, p) * 1e-8;
        let Some(chol) = (&info + ridge).cholesky() else { break };
        let delta = chol.solve(&grad);
        let mut step = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let cand = &beta + &delta * step;
            let (l, g, i) = loglik_grad(&cand);
            if l.is_finite() && l >= ll {
                moved = (l - ll) > 1e-12 * (1.0 + ll.abs());
                (beta, ll, grad, info) = (cand, l, g, i);
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
    }
    beta.iter().map(|b| b.clamp(-20.0, 20.0)).collect()
}

/// Maximizes the marginal likelihood over `(beta, theta)` with Nelder–Mead.
///
/// Diagonal entries of the covariance factor are reflected at zero, so the
/// search is unconstrained.
pub fn fit(
    data: impl Into<Arc<GlmmData>>,
    family: FamilySpec,
    structure: RandomStructure,
    control: &FitControl,
) -> Result<FittedGlmm> {
    let data: Arc<GlmmData> = data.into();
    let (p, q) = (data.p(), data.q());
    if data.n_clusters() <= q {
        return Err(GlmmError::Config(format!(
            "{} clusters cannot identify a {q}-dimensional random effect",
            data.n_clusters()
        )));
    }
    check_responses(&data, family)?;
    let nagq = control.nagq.unwrap_or_else(|| default_fit_nagq(q));
    let rule = gh_rule(nagq, q)?;
    let k = theta_len(q, structure);
    let diag_mask: Vec<bool> = theta_positions(q, structure).iter().map(|(r, c)| r == c).collect();

    let beta0 = match &control.start_beta {
        Some(b) if b.len() == p => b.clone(),
        Some(b) => {
            return Err(GlmmError::Config(format!("start beta has length {}, expected {p}", b.len())))
        }
        None => glm_start(&data, family),
    };
    let theta0 = match &control.start_theta {
        Some(t) if t.len() == k => t.clone(),
        Some(t) => {
            return Err(GlmmError::Config(format!("start theta has length {}, expected {k}", t.len())))
        }
        None => diag_mask.iter().map(|&d| if d { 1.0 } else { 0.0 }).collect(),
    };
    let reflect = |v: &[f64]| -> (DVector<f64>, Vec<f64>) {
        let beta = DVector::from_column_slice(&v[..p]);
        let theta = v[p..].iter().zip(&diag_mask).map(|(t, &d)| if d { t.abs() } else { *t }).collect();
        (beta, theta)
    };

    let mut warm: Option<Vec<ClusterMode>> = None;
    let objective = |v: &[f64]| -> f64 {
        let (beta, theta) = reflect(v);
        let Ok(rel) = RelCovFactor::new(theta, q, structure) else { return f64::INFINITY };
        let Ok(modes) = modes_with(&beta, &rel, &data, family, warm.as_deref()) else {
            return f64::INFINITY;
        };
        let lls = par::try_map_indexed(data.n_clusters(), |i| {
            ClusterKernel::new(data.cluster(i), family, &beta, rel.lambda()).log_marginal(&rule, &modes[i])
        });
        match lls {
            Ok(lls) => {
                warm = Some(modes);
                -lls.iter().sum::<f64>()
            }
            Err(_) => f64::INFINITY,
        }
    };
    let x0: Vec<f64> = beta0.into_iter().chain(theta0).collect();
    let min = optim::minimize(objective, &x0, &control.optimizer);
    let (beta, theta) = reflect(&min.x);
    if !min.converged {
        return Err(GlmmError::NonConvergence {
            evaluations: min.evaluations,
            best_loglik: -min.value,
            best_params: beta.iter().copied().chain(theta).collect(),
        });
    }
    let mut fitted = load_fitted(beta.as_slice(), &theta, structure, data, family, nagq)?;
    fitted.convergence.optimized = true;
    fitted.convergence.evaluations = min.evaluations;
    fitted.convergence.restarts = min.restarts;
    Ok(fitted)
}
