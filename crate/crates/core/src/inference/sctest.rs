//! Score-based parameter instability tests.
//!
//! Scores are ordered by an auxiliary variable, centered, decorrelated with
//! `J^{-1/2}` where `J = B / I` is the per-cluster score covariance, and
//! cumulated with scaling `I^{-1/2}`. Ties in the ordering variable form
//! groups and the process is only observed at group boundaries. Null
//! distributions come from Brownian bridges simulated on the same grid.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Mutex, OnceLock};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::sym_inv_sqrt;
use crate::derivatives::estfun;
use crate::error::{GlmmError, Result};
use crate::estimation::FittedGlmm;
use crate::model_data::Parameterization;
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Functional {
    /// Double maximum.
    Dm,
    /// Cramér–von Mises.
    Cvm,
    /// Supremum of the LM statistic over a trimmed interval.
    MaxLm,
    /// Maximum LM statistic over the cutpoints of an ordinal variable.
    MaxLmo,
}

impl FromStr for Functional {
    type Err = GlmmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dm" => Ok(Self::Dm),
            "cvm" => Ok(Self::Cvm),
            "maxlm" => Ok(Self::MaxLm),
            "maxlmo" => Ok(Self::MaxLmo),
            other => Err(GlmmError::Config(format!(
                "unknown functional '{other}' (expected dm, cvm, maxlm or maxlmo)"
            ))),
        }
    }
}

impl fmt::Display for Functional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Dm => "dm",
            Self::Cvm => "cvm",
            Self::MaxLm => "maxlm",
            Self::MaxLmo => "maxlmo",
        })
    }
}

#[derive(Debug, Clone)]
pub struct SctestOptions {
    pub functional: Functional,
    /// Zero-based score columns to test; `None` tests all.
    pub parm: Option<Vec<usize>>,
    /// Trimming for `MaxLm`: the statistic is maximized over `[trim, 1 - trim]`.
    pub trim: f64,
    pub replications: usize,
    pub seed: u64,
    /// Scale of the random-effect scores.
    pub ranpar: Parameterization,
}

impl Default for SctestOptions {
    fn default() -> Self {
        Self {
            functional: Functional::Dm,
            parm: None,
            trim: 0.1,
            replications: 50_000,
            seed: 1,
            ranpar: Parameterization::Var,
        }
    }
}

/// Decorrelated cumulative score process observed at group boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct FluctuationPath {
    /// `0 = t_0 < t_1 < .. < t_G = 1`.
    pub t: Vec<f64>,
    /// One row per time point (including `t = 0`), one column per parameter.
    pub values: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTestResult {
    pub statistic: f64,
    pub functional: Functional,
    pub p_value: f64,
    /// Columns of `path` restricted to the tested parameters.
    pub path: FluctuationPath,
    pub parm: Vec<usize>,
    /// Simulated 5% critical value of the functional.
    pub critical_value: f64,
    /// Time points where the pointwise statistic exceeds the critical value
    /// (empty for `Cvm`, which has no pointwise form).
    pub crossings: Vec<f64>,
}

/// Sorting permutation and group boundaries (cumulative counts) of `ordering`.
fn ordering_groups(ordering: &[f64]) -> Result<(Vec<usize>, Vec<usize>)> {
    if ordering.iter().any(|v| !v.is_finite()) {
        return Err(GlmmError::Config("ordering variable has non-finite values".into()));
    }
    let mut perm: Vec<usize> = (0..ordering.len()).collect();
    perm.sort_by(|&a, &b| ordering[a].total_cmp(&ordering[b]));
    let mut bounds = Vec::new();
    for k in 1..=perm.len() {
        if k == perm.len() || ordering[perm[k]] != ordering[perm[k - 1]] {
            bounds.push(k);
        }
    }
    if bounds.len() < 2 {
        return Err(GlmmError::Degenerate("ordering variable is constant".into()));
    }
    Ok((perm, bounds))
}

/// `path(t_g) = R I^{-1/2} sum_{i <= n_g} s_(i)` at each group boundary, with
/// an exact zero at `t = 0`. `root_inv` is `J^{-1/2}`.
pub fn cumulative_score_process(
    scores: &DMatrix<f64>,
    ordering: &[f64],
    root_inv: &DMatrix<f64>,
) -> Result<FluctuationPath> {
    let (n, k) = scores.shape();
    if ordering.len() != n {
        return Err(GlmmError::Config(format!(
            "ordering has {} values for {n} clusters",
            ordering.len()
        )));
    }
    if root_inv.shape() != (k, k) {
        return Err(GlmmError::Shape(format!("decorrelation matrix must be {k}x{k}")));
    }
    let (perm, bounds) = ordering_groups(ordering)?;
    let scale = 1.0 / (n as f64).sqrt();
    let mut values = DMatrix::zeros(bounds.len() + 1, k);
    let mut t = Vec::with_capacity(bounds.len() + 1);
    t.push(0.0);
    let mut acc = nalgebra::DVector::zeros(k);
    let mut next = 0;
    for (g, &b) in bounds.iter().enumerate() {
        while next < b {
            acc += scores.row(perm[next]).transpose();
            next += 1;
        }
        let v = root_inv * &acc * scale;
        values.row_mut(g + 1).copy_from(&v.transpose());
        t.push(b as f64 / n as f64);
    }
    Ok(FluctuationPath { t, values })
}

fn pointwise(functional: Functional, t: f64, row: &[f64]) -> f64 {
    match functional {
        Functional::Dm => row.iter().fold(0.0, |m, v| m.max(v.abs())),
        Functional::Cvm => row.iter().map(|v| v * v).sum(),
        Functional::MaxLm | Functional::MaxLmo => {
            row.iter().map(|v| v * v).sum::<f64>() / (t * (1.0 - t))
        }
    }
}

/// Whether grid point `g` (of `t`, which starts at 0) enters the functional.
fn included(functional: Functional, trim: f64, t: &[f64], g: usize) -> bool {
    match functional {
        Functional::Dm | Functional::Cvm => g > 0,
        Functional::MaxLm => t[g] >= trim - 1e-12 && t[g] <= 1.0 - trim + 1e-12,
        Functional::MaxLmo => g > 0 && g + 1 < t.len(),
    }
}

/// Value of the functional on a path given row-wise (`rows[g]` at `t[g]`).
fn functional_value(functional: Functional, trim: f64, t: &[f64], rows: &[&[f64]]) -> f64 {
    match functional {
        Functional::Cvm => (1..t.len()).map(|g| (t[g] - t[g - 1]) * pointwise(functional, t[g], rows[g])).sum(),
        _ => (0..t.len())
            .filter(|&g| included(functional, trim, t, g))
            .map(|g| pointwise(functional, t[g], rows[g]))
            .fold(0.0, f64::max),
    }
}

fn check_grid(functional: Functional, trim: f64, t: &[f64]) -> Result<()> {
    if functional == Functional::MaxLm && !(0.0..0.5).contains(&trim) {
        return Err(GlmmError::Config(format!("trim {trim} must lie in [0, 0.5)")));
    }
    if !(0..t.len()).any(|g| included(functional, trim, t, g)) {
        return Err(GlmmError::Degenerate(format!(
            "no ordering cutpoints available for the {functional} functional"
        )));
    }
    Ok(())
}

/// Sorted simulated null values of a functional for Brownian bridges of a
/// given dimension on a given grid.
#[derive(Debug, Clone)]
pub struct BridgeNull {
    sorted: Vec<f64>,
}

const PATHS_PER_STREAM: usize = 500;

impl BridgeNull {
    /// Paths are drawn in blocks, each from its own stream of a ChaCha
    /// generator seeded with `seed`, so results do not depend on threading.
    pub fn simulate(
        t: &[f64],
        dim: usize,
        functional: Functional,
        trim: f64,
        replications: usize,
        seed: u64,
    ) -> Self {
        let blocks = replications.div_ceil(PATHS_PER_STREAM);
        let chunks = par::map_indexed(blocks, |blk| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(blk as u64);
            let count = PATHS_PER_STREAM.min(replications - blk * PATHS_PER_STREAM);
            let g = t.len();
            let mut w = vec![0.0; g * dim];
            let mut out = Vec::with_capacity(count);
            for _ in 0..count {
                for j in 0..dim {
                    let mut acc = 0.0;
                    for k in 1..g {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        acc += z * (t[k] - t[k - 1]).sqrt();
                        w[k * dim + j] = acc;
                    }
                }
                let end: Vec<f64> = w[(g - 1) * dim..].to_vec();
                for k in 0..g {
                    for j in 0..dim {
                        w[k * dim + j] -= t[k] * end[j];
                    }
                }
                let rows: Vec<&[f64]> = (0..g).map(|k| &w[k * dim..(k + 1) * dim]).collect();
                out.push(functional_value(functional, trim, t, &rows));
            }
            out
        });
        let mut sorted: Vec<f64> = chunks.into_iter().flatten().collect();
        sorted.sort_by(f64::total_cmp);
        Self { sorted }
    }

    /// Cached variant of [`Self::simulate`].
    pub fn cached(
        t: &[f64],
        dim: usize,
        functional: Functional,
        trim: f64,
        replications: usize,
        seed: u64,
    ) -> Self {
        type Key = (Vec<u64>, usize, Functional, u64, usize, u64);
        static CACHE: OnceLock<Mutex<HashMap<Key, BridgeNull>>> = OnceLock::new();
        let key: Key = (
            t.iter().map(|v| v.to_bits()).collect(),
            dim,
            functional,
            trim.to_bits(),
            replications,
            seed,
        );
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        if let Some(hit) = cache.lock().expect("cache lock").get(&key) {
            return hit.clone();
        }
        let null = Self::simulate(t, dim, functional, trim, replications, seed);
        let mut guard = cache.lock().expect("cache lock");
        if guard.len() >= 32 {
            guard.clear();
        }
        guard.insert(key, null.clone());
        null
    }

    /// Share of simulated values at or above `statistic`.
    pub fn p_value(&self, statistic: f64) -> f64 {
        let below = self.sorted.partition_point(|v| *v < statistic);
        (self.sorted.len() - below) as f64 / self.sorted.len() as f64
    }

    pub fn quantile(&self, level: f64) -> f64 {
        let idx = ((self.sorted.len() as f64 * level).ceil() as usize).clamp(1, self.sorted.len());
        self.sorted[idx - 1]
    }
}

/// Instability test on a precomputed score matrix (rows are clusters).
pub fn sctest_scores(scores: &DMatrix<f64>, order_by: &[f64], opts: &SctestOptions) -> Result<ScoreTestResult> {
    let (n, k) = scores.shape();
    let parm = match &opts.parm {
        Some(p) if p.is_empty() => return Err(GlmmError::Config("parm selects no columns".into())),
        Some(p) => {
            if let Some(bad) = p.iter().find(|&&j| j >= k) {
                return Err(GlmmError::Config(format!("parm index {bad} out of range for {k} columns")));
            }
            p.clone()
        }
        None => (0..k).collect(),
    };
    if opts.replications == 0 {
        return Err(GlmmError::Config("replications must be positive".into()));
    }
    if n < 2 {
        return Err(GlmmError::Degenerate("need at least two clusters".into()));
    }
    let mean = scores.row_mean();
    let centered = DMatrix::from_fn(n, k, |i, j| scores[(i, j)] - mean[j]);
    let full_path = if centered.iter().all(|v| *v == 0.0) {
        // nothing fluctuates; the decorrelation is undefined but the path is zero
        let (_, bounds) = ordering_groups(order_by)?;
        let mut t = vec![0.0];
        t.extend(bounds.iter().map(|&b| b as f64 / n as f64));
        FluctuationPath { values: DMatrix::zeros(t.len(), k), t }
    } else {
        let j = centered.tr_mul(&centered) / n as f64;
        let root = sym_inv_sqrt(&j, "score covariance")?;
        cumulative_score_process(&centered, order_by, &root)?
    };
    let t = full_path.t.clone();
    check_grid(opts.functional, opts.trim, &t)?;
    let values = full_path.values.select_columns(&parm);
    let row_vecs: Vec<Vec<f64>> = (0..t.len()).map(|g| values.row(g).iter().copied().collect()).collect();
    let rows: Vec<&[f64]> = row_vecs.iter().map(|r| r.as_slice()).collect();
    let statistic = functional_value(opts.functional, opts.trim, &t, &rows);

    let null = BridgeNull::cached(&t, parm.len(), opts.functional, opts.trim, opts.replications, opts.seed);
    let p_value = null.p_value(statistic);
    let critical_value = null.quantile(0.95);
    let crossings = if opts.functional == Functional::Cvm {
        Vec::new()
    } else {
        (0..t.len())
            .filter(|&g| included(opts.functional, opts.trim, &t, g))
            .filter(|&g| pointwise(opts.functional, t[g], rows[g]) > critical_value)
            .map(|g| t[g])
            .collect()
    };
    Ok(ScoreTestResult {
        statistic,
        functional: opts.functional,
        p_value,
        path: FluctuationPath { t, values },
        parm,
        critical_value,
        crossings,
    })
}

/// Instability test of a fitted model against `order_by` (one value per cluster).
pub fn sctest(fit: &FittedGlmm, order_by: &[f64], opts: &SctestOptions, nagq: usize) -> Result<ScoreTestResult> {
    if order_by.len() != fit.data.n_clusters() {
        return Err(GlmmError::Config(format!(
            "order_by has {} values for {} clusters",
            order_by.len(),
            fit.data.n_clusters()
        )));
    }
    let scores = estfun(fit, opts.ranpar, nagq)?;
    sctest_scores(&scores.values, order_by, opts)
}
