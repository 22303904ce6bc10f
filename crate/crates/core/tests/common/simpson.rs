//! Composite Simpson integration over the spherical random effect of a
//! scalar-random-effect cluster, for the log marginal likelihood and its
//! exact first derivatives.

use glmm_deriv::family::{FamilySpec, ScorePath};
use glmm_deriv::model_data::ClusterBlock;

pub struct SimpsonCluster {
    pub loglik: f64,
    pub beta: Vec<f64>,
    /// Derivative with respect to the scalar factor lambda.
    pub lambda: f64,
}

/// Integrates over `u` in `[-half_width, half_width]` (that is, `b` within
/// `half_width` standard deviations) with `panels` Simpson panels.
pub fn simpson_cluster(
    block: &ClusterBlock,
    family: FamilySpec,
    beta: &[f64],
    lambda: f64,
    half_width: f64,
    panels: usize,
) -> SimpsonCluster {
    assert!(panels.is_multiple_of(2) && block.z.ncols() == 1);
    let p = beta.len();
    let n = block.y.len();
    let offset: Vec<f64> =
        (0..n).map(|r| (0..p).map(|j| block.x[(r, j)] * beta[j]).sum()).collect();
    let h = 2.0 * half_width / panels as f64;
    let mut logs = Vec::with_capacity(panels + 1);
    let mut grads = Vec::with_capacity(panels + 1);
    for k in 0..=panels {
        let u = -half_width + k as f64 * h;
        let coef: f64 = if k == 0 || k == panels {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let mut log_f = coef.ln() - 0.5 * u * u;
        let mut gb = vec![0.0; p];
        let mut gl = 0.0;
        for r in 0..n {
            let eta = offset[r] + block.z[(r, 0)] * lambda * u;
            let t = family.eta_terms(block.y[r], eta, ScorePath::General);
            log_f += t.log_density;
            for (j, g) in gb.iter_mut().enumerate() {
                *g += block.x[(r, j)] * t.score;
            }
            gl += block.z[(r, 0)] * u * t.score;
        }
        logs.push(log_f);
        grads.push((gb, gl));
    }
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total: f64 = 0.0;
    let mut beta_num = vec![0.0; p];
    let mut lambda_num = 0.0;
    for (l, (gb, gl)) in logs.iter().zip(&grads) {
        let w = (l - max).exp();
        total += w;
        for (acc, g) in beta_num.iter_mut().zip(gb) {
            *acc += w * g;
        }
        lambda_num += w * gl;
    }
    let log_norm = (h / 3.0).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    SimpsonCluster {
        loglik: max + total.ln() + log_norm,
        beta: beta_num.iter().map(|v| v / total).collect(),
        lambda: lambda_num / total,
    }
}
