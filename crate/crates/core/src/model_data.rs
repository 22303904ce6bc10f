//! Clustered data, the relative covariance factor, and the maps between the
//! theta, variance-covariance and sd-correlation scales.
//!
//! Ordering conventions:
//! - theta fills the lower triangle of the factor column by column
//!   (`(0,0), (1,0), .., (q-1,0), (1,1), ..`), or just the diagonal;
//! - the `var` and `sd` scales list the q diagonal parameters first
//!   (variances / standard deviations) followed by the off-diagonal ones
//!   (covariances / correlations), column by column below the diagonal.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GlmmError, Result};

/// Observations belonging to one cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterBlock {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    /// Row indices into the original (ungrouped) data.
    pub rows: Vec<usize>,
}

impl ClusterBlock {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Clustered response with dense fixed and random design matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct GlmmData {
    clusters: Vec<ClusterBlock>,
    labels: Vec<String>,
    fixed_names: Vec<String>,
    random_names: Vec<String>,
    n_obs: usize,
}

impl GlmmData {
    /// Groups rows by cluster id (clusters keep order of first appearance).
    ///
    /// `x` is N x p, `z` is N x q, `cluster` has one id per row.
    pub fn new<S: AsRef<str>>(
        y: &[f64],
        x: &DMatrix<f64>,
        z: &DMatrix<f64>,
        cluster: &[S],
    ) -> Result<Self> {
        let n = y.len();
        if x.nrows() != n || z.nrows() != n || cluster.len() != n {
            return Err(GlmmError::Shape(format!(
                "row counts differ: y={n}, X={}, Z={}, cluster={}",
                x.nrows(),
                z.nrows(),
                cluster.len()
            )));
        }
        if n == 0 {
            return Err(GlmmError::Shape("no observations".into()));
        }
        if x.ncols() == 0 || z.ncols() == 0 {
            return Err(GlmmError::Shape("design matrices need at least one column".into()));
        }
        if y.iter().chain(x.iter()).chain(z.iter()).any(|v| !v.is_finite()) {
            return Err(GlmmError::Domain("non-finite value in data".into()));
        }

        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut labels = Vec::new();
        let mut members: Vec<Vec<usize>> = Vec::new();
        for (row, id) in cluster.iter().enumerate() {
            let id = id.as_ref();
            let c = *index.entry(id).or_insert_with(|| {
                labels.push(id.to_string());
                members.push(Vec::new());
                labels.len() - 1
            });
            members[c].push(row);
        }

        let clusters = members
            .into_iter()
            .map(|rows| ClusterBlock {
                y: DVector::from_iterator(rows.len(), rows.iter().map(|&r| y[r])),
                x: x.select_rows(rows.iter()),
                z: z.select_rows(rows.iter()),
                rows,
            })
            .collect();

        let p = x.ncols();
        let q = z.ncols();
        let data = Self {
            clusters,
            labels,
            fixed_names: (0..p).map(|j| format!("beta{j}")).collect(),
            random_names: (0..q).map(|j| format!("re{j}")).collect(),
            n_obs: n,
        };
        data.check_rank(x)?;
        Ok(data)
    }

    pub fn with_names(mut self, fixed: Vec<String>, random: Vec<String>) -> Result<Self> {
        if fixed.len() != self.p() || random.len() != self.q() {
            return Err(GlmmError::Shape("name vectors do not match design widths".into()));
        }
        self.fixed_names = fixed;
        self.random_names = random;
        Ok(self)
    }

    fn check_rank(&self, x: &DMatrix<f64>) -> Result<()> {
        let xtx = x.tr_mul(x);
        let eig = xtx.symmetric_eigenvalues();
        let max = eig.iter().cloned().fold(0.0, f64::max);
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        if max <= 0.0 || min <= 1e-12 * max {
            return Err(GlmmError::Shape(format!(
                "fixed-effect design is rank deficient (eigenvalue ratio {:.3e})",
                min / max
            )));
        }
        Ok(())
    }

    pub fn clusters(&self) -> &[ClusterBlock] {
        &self.clusters
    }

    pub fn cluster(&self, i: usize) -> &ClusterBlock {
        &self.clusters[i]
    }

    pub fn cluster_labels(&self) -> &[String] {
        &self.labels
    }

    pub fn fixed_names(&self) -> &[String] {
        &self.fixed_names
    }

    pub fn random_names(&self) -> &[String] {
        &self.random_names
    }

    /// Number of clusters `I`.
    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    /// Total number of observations `N`.
    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        self.clusters.iter().map(ClusterBlock::len).collect()
    }

    pub fn p(&self) -> usize {
        self.clusters[0].x.ncols()
    }

    pub fn q(&self) -> usize {
        self.clusters[0].z.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RandomStructure {
    #[default]
    Unstructured,
    Diagonal,
}

impl FromStr for RandomStructure {
    type Err = GlmmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unstructured" => Ok(Self::Unstructured),
            "diagonal" => Ok(Self::Diagonal),
            other => Err(GlmmError::Config(format!("unknown covariance structure '{other}'"))),
        }
    }
}

/// Output scale for random-effect hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Parameterization {
    #[default]
    Theta,
    Var,
    Sd,
}

impl FromStr for Parameterization {
    type Err = GlmmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "theta" => Ok(Self::Theta),
            "var" => Ok(Self::Var),
            "sd" => Ok(Self::Sd),
            other => Err(GlmmError::Config(format!(
                "unknown parameterization '{other}' (expected theta, var or sd)"
            ))),
        }
    }
}

impl fmt::Display for Parameterization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Theta => "theta",
            Self::Var => "var",
            Self::Sd => "sd",
        })
    }
}

/// Number of free theta entries.
pub fn theta_len(q: usize, structure: RandomStructure) -> usize {
    match structure {
        RandomStructure::Unstructured => q * (q + 1) / 2,
        RandomStructure::Diagonal => q,
    }
}

/// Lower-triangular positions filled by theta, in theta order.
pub fn theta_positions(q: usize, structure: RandomStructure) -> Vec<(usize, usize)> {
    match structure {
        RandomStructure::Unstructured => {
            (0..q).flat_map(|col| (col..q).map(move |row| (row, col))).collect()
        }
        RandomStructure::Diagonal => (0..q).map(|j| (j, j)).collect(),
    }
}

/// Positions of G entries on the var/sd scales, in parameter order.
pub fn covariance_positions(q: usize, structure: RandomStructure) -> Vec<(usize, usize)> {
    let mut pos: Vec<(usize, usize)> = (0..q).map(|j| (j, j)).collect();
    if structure == RandomStructure::Unstructured {
        pos.extend((0..q).flat_map(|col| (col + 1..q).map(move |row| (row, col))));
    }
    pos
}

pub fn theta_to_lambda(theta: &[f64], q: usize, structure: RandomStructure) -> Result<DMatrix<f64>> {
    let k = theta_len(q, structure);
    if theta.len() != k {
        return Err(GlmmError::Shape(format!(
            "theta has {} entries, expected {k} for q={q} ({structure:?})",
            theta.len()
        )));
    }
    let mut lambda = DMatrix::zeros(q, q);
    for (&(r, c), &v) in theta_positions(q, structure).iter().zip(theta) {
        lambda[(r, c)] = v;
    }
    Ok(lambda)
}

pub fn lambda_to_g(lambda: &DMatrix<f64>) -> DMatrix<f64> {
    let g = lambda * lambda.transpose();
    // exact symmetry
    (&g + g.transpose()) * 0.5
}

/// Derivative of `Lambda Lambda^T` with respect to the (i, j) entry of
/// Lambda: `Lambda J_ji + J_ij Lambda^T`. Indices are zero-based.
pub fn dg_dlambda_entry(lambda: &DMatrix<f64>, i: usize, j: usize) -> Result<DMatrix<f64>> {
    let q = lambda.nrows();
    if i >= q || j >= q || j > i {
        return Err(GlmmError::Domain(format!(
            "({i},{j}) is not a lower-triangular position of a {q}x{q} factor"
        )));
    }
    let mut d = DMatrix::zeros(q, q);
    // Lambda J_ji: column i of the result is column j of Lambda
    for r in 0..q {
        d[(r, i)] += lambda[(r, j)];
    }
    // J_ij Lambda^T: row i of the result is column j of Lambda
    for c in 0..q {
        d[(i, c)] += lambda[(c, j)];
    }
    Ok(d)
}

/// Lower-triangular relative covariance factor with its free parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RelCovFactor {
    q: usize,
    structure: RandomStructure,
    theta: Vec<f64>,
    lambda: DMatrix<f64>,
}

impl RelCovFactor {
    pub fn new(theta: Vec<f64>, q: usize, structure: RandomStructure) -> Result<Self> {
        let lambda = theta_to_lambda(&theta, q, structure)?;
        Ok(Self { q, structure, theta, lambda })
    }

    /// Builds the factor from a covariance matrix via Cholesky.
    pub fn from_covariance(g: &DMatrix<f64>, structure: RandomStructure) -> Result<Self> {
        let q = g.nrows();
        match structure {
            RandomStructure::Diagonal => {
                let theta = (0..q)
                    .map(|j| {
                        let v = g[(j, j)];
                        if v > 0.0 {
                            Ok(v.sqrt())
                        } else {
                            Err(GlmmError::Domain(format!("variance {v} is not positive")))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                Self::new(theta, q, structure)
            }
            RandomStructure::Unstructured => {
                let chol = g.clone().cholesky().ok_or_else(|| {
                    GlmmError::Domain("covariance matrix is not positive definite".into())
                })?;
                let l = chol.l();
                let theta = theta_positions(q, structure).iter().map(|&p| l[p]).collect();
                Self::new(theta, q, structure)
            }
        }
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn structure(&self) -> RandomStructure {
        self.structure
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn lambda(&self) -> &DMatrix<f64> {
        &self.lambda
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        lambda_to_g(&self.lambda)
    }

    pub fn positions(&self) -> Vec<(usize, usize)> {
        theta_positions(self.q, self.structure)
    }

    /// Smallest diagonal entry of Lambda in absolute value.
    pub fn min_abs_diagonal(&self) -> f64 {
        (0..self.q).map(|j| self.lambda[(j, j)].abs()).fold(f64::INFINITY, f64::min)
    }

    /// Parameter values on the requested scale.
    pub fn params(&self, scale: Parameterization) -> Vec<f64> {
        let g = self.covariance();
        let pos = covariance_positions(self.q, self.structure);
        match scale {
            Parameterization::Theta => self.theta.clone(),
            Parameterization::Var => pos.iter().map(|&p| g[p]).collect(),
            Parameterization::Sd => pos
                .iter()
                .map(|&(r, c)| {
                    if r == c {
                        g[(r, r)].sqrt()
                    } else {
                        g[(r, c)] / (g[(r, r)] * g[(c, c)]).sqrt()
                    }
                })
                .collect(),
        }
    }

    /// Inverse of [`Self::params`]. Fails when the values are infeasible.
    pub fn from_params(
        values: &[f64],
        q: usize,
        structure: RandomStructure,
        scale: Parameterization,
    ) -> Result<Self> {
        let k = theta_len(q, structure);
        if values.len() != k {
            return Err(GlmmError::Shape(format!("expected {k} parameters, got {}", values.len())));
        }
        match scale {
            Parameterization::Theta => {
                if let Some(j) = (0..q).find(|&j| {
                    let idx = theta_positions(q, structure).iter().position(|&p| p == (j, j));
                    idx.is_some_and(|i| values[i] < 0.0)
                }) {
                    return Err(GlmmError::Domain(format!("diagonal theta entry {j} is negative")));
                }
                Self::new(values.to_vec(), q, structure)
            }
            Parameterization::Var | Parameterization::Sd => {
                let pos = covariance_positions(q, structure);
                let mut g = DMatrix::zeros(q, q);
                if scale == Parameterization::Var {
                    for (&(r, c), &v) in pos.iter().zip(values) {
                        g[(r, c)] = v;
                        g[(c, r)] = v;
                    }
                } else {
                    let sd = &values[..q];
                    if let Some(j) = sd.iter().position(|&s| s <= 0.0) {
                        return Err(GlmmError::Domain(format!("standard deviation {j} not positive")));
                    }
                    for (&(r, c), &v) in pos.iter().zip(values) {
                        if r == c {
                            g[(r, r)] = v * v;
                        } else {
                            if v.abs() >= 1.0 {
                                return Err(GlmmError::Domain(format!("correlation {v} outside (-1, 1)")));
                            }
                            g[(r, c)] = v * sd[r] * sd[c];
                            g[(c, r)] = g[(r, c)];
                        }
                    }
                }
                Self::from_covariance(&g, structure)
            }
        }
    }
}

/// Human-readable labels for random-effect parameters.
pub fn covariance_labels(
    names: &[String],
    structure: RandomStructure,
    scale: Parameterization,
) -> Vec<String> {
    let q = names.len();
    match scale {
        Parameterization::Theta => theta_positions(q, structure)
            .into_iter()
            .map(|(r, c)| format!("theta[{},{}]", names[r], names[c]))
            .collect(),
        Parameterization::Var => covariance_positions(q, structure)
            .into_iter()
            .map(|(r, c)| {
                if r == c {
                    format!("var[{}]", names[r])
                } else {
                    format!("cov[{},{}]", names[r], names[c])
                }
            })
            .collect(),
        Parameterization::Sd => covariance_positions(q, structure)
            .into_iter()
            .map(|(r, c)| {
                if r == c {
                    format!("sd[{}]", names[r])
                } else {
                    format!("cor[{},{}]", names[r], names[c])
                }
            })
            .collect(),
    }
}

/// Jacobian of the var-scale parameters with respect to theta
/// (rows follow var order, columns follow theta order).
pub fn covariance_jacobian(rel: &RelCovFactor) -> DMatrix<f64> {
    let q = rel.q();
    let tpos = rel.positions();
    let gpos = covariance_positions(q, rel.structure());
    let mut jac = DMatrix::zeros(gpos.len(), tpos.len());
    for (col, &(i, j)) in tpos.iter().enumerate() {
        let d = dg_dlambda_entry(rel.lambda(), i, j).expect("theta positions are lower triangular");
        for (row, &p) in gpos.iter().enumerate() {
            jac[(row, col)] = d[p];
        }
    }
    jac
}

/// Jacobian of the var-scale parameters with respect to the sd-scale ones.
fn sd_jacobian(rel: &RelCovFactor) -> DMatrix<f64> {
    let q = rel.q();
    let gpos = covariance_positions(q, rel.structure());
    let sd = rel.params(Parameterization::Sd);
    let sigma = &sd[..q];
    let mut jac = DMatrix::zeros(gpos.len(), gpos.len());
    for (row, &(r, c)) in gpos.iter().enumerate() {
        if r == c {
            jac[(row, r)] = 2.0 * sigma[r];
        } else {
            let rho = sd[row];
            jac[(row, r)] = rho * sigma[c];
            jac[(row, c)] = rho * sigma[r];
            jac[(row, row)] = sigma[r] * sigma[c];
        }
    }
    jac
}

/// Maps theta-scale score columns to the requested scale by the chain rule.
///
/// `scores_theta` has one row per cluster and one column per theta entry.
pub fn reparameterize_scores(
    scores_theta: &DMatrix<f64>,
    rel: &RelCovFactor,
    target: Parameterization,
) -> Result<DMatrix<f64>> {
    if scores_theta.ncols() != rel.theta().len() {
        return Err(GlmmError::Shape(format!(
            "score matrix has {} columns, factor has {} parameters",
            scores_theta.ncols(),
            rel.theta().len()
        )));
    }
    if target == Parameterization::Theta {
        return Ok(scores_theta.clone());
    }
    for j in 0..rel.q() {
        if rel.lambda()[(j, j)].abs() < 1e-12 {
            return Err(GlmmError::Singularity(format!(
                "theta entry ({j},{j}) is zero; the {target} scale is undefined at the boundary"
            )));
        }
    }
    let jac = covariance_jacobian(rel);
    let jac_inv = jac.clone().try_inverse().ok_or_else(|| {
        GlmmError::Singularity("covariance Jacobian is not invertible".into())
    })?;
    let var_scores = scores_theta * jac_inv;
    match target {
        Parameterization::Var => Ok(var_scores),
        Parameterization::Sd => Ok(var_scores * sd_jacobian(rel)),
        Parameterization::Theta => unreachable!(),
    }
}
