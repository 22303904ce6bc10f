use thiserror::Error;

/// Error type shared by every module of the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum GlmmError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("singular matrix: {0}")]
    Singularity(String),

    #[error("estimation failed in cluster {cluster}: {reason}")]
    Estimation { cluster: usize, reason: String },

    #[error(
        "optimizer did not converge after {evaluations} evaluations \
         (best log-likelihood {best_loglik})"
    )]
    NonConvergence {
        evaluations: usize,
        best_loglik: f64,
        /// Best (beta, theta) vector seen so far.
        best_params: Vec<f64>,
    },

    #[error("non-finite integrand at quadrature node {node}")]
    NonFinite { node: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),
}

impl GlmmError {
    /// Stable category code used in machine-readable error reports.
    pub fn category(&self) -> &'static str {
        match self {
            GlmmError::Domain(_) | GlmmError::Shape(_) | GlmmError::Config(_) => "config",
            GlmmError::Singularity(_) => "singularity",
            GlmmError::Estimation { .. } | GlmmError::NonConvergence { .. } => "estimation",
            GlmmError::NonFinite { .. } => "estimation",
            GlmmError::Degenerate(_) => "degenerate",
        }
    }
}

pub type Result<T> = std::result::Result<T, GlmmError>;
