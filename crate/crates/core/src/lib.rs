//! Post-estimation derivatives for generalized linear mixed models with a
//! single grouping factor: casewise marginal log-likelihoods, scores and
//! Hessians by adaptive Gauss–Hermite quadrature, plus the sandwich,
//! score-based instability and Vuong tests built on them.

pub mod derivatives;
pub mod error;
pub mod estimation;
pub mod family;
pub mod inference;
pub mod model_data;
pub mod optim;
pub mod par;
pub mod quadrature;

pub use derivatives::{estfun, hessian, llcont, ScoreMatrix};
pub use error::{GlmmError, Result};
pub use estimation::{fit, load_fitted, FitControl, FittedGlmm};
pub use family::{FamilyKind, FamilySpec, LinkKind};
pub use model_data::{GlmmData, Parameterization, RandomStructure, RelCovFactor};
pub use inference::chisq::weighted_chisq_sf;
pub use inference::sandwich::{sandwich_vcov, SandwichResult};
pub use inference::sctest::{sctest, Functional, ScoreTestResult, SctestOptions};
pub use inference::vuong::{vuong_lr_test, vuong_variance_test, VuongLrResult, VuongVarianceResult};
