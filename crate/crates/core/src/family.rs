//! Exponential-family kernels.
//!
//! Only the one-parameter families with `a(phi) = 1` are supported:
//! Bernoulli (logit, probit, cloglog links) and Poisson (log link).

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

use crate::error::{GlmmError, Result};

/// Mean clamp applied before density evaluation.
pub const MU_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    Binomial,
    Poisson,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkKind {
    Logit,
    Probit,
    Cloglog,
    Log,
}

impl FromStr for FamilyKind {
    type Err = GlmmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binomial" => Ok(FamilyKind::Binomial),
            "poisson" => Ok(FamilyKind::Poisson),
            other => Err(GlmmError::Config(format!("unknown family '{other}'"))),
        }
    }
}

impl FromStr for LinkKind {
    type Err = GlmmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logit" => Ok(LinkKind::Logit),
            "probit" => Ok(LinkKind::Probit),
            "cloglog" => Ok(LinkKind::Cloglog),
            "log" => Ok(LinkKind::Log),
            other => Err(GlmmError::Config(format!("unknown link '{other}'"))),
        }
    }
}

impl fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FamilyKind::Binomial => "binomial",
            FamilyKind::Poisson => "poisson",
        })
    }
}

impl fmt::Display for LinkKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LinkKind::Logit => "logit",
            LinkKind::Probit => "probit",
            LinkKind::Cloglog => "cloglog",
            LinkKind::Log => "log",
        })
    }
}

/// Which algebraic route to use for the GLM score weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScorePath {
    /// `y - mu` for canonical links, the full `D^-1 V^-1 (y - mu)` otherwise.
    Auto,
    /// Always the full `D^-1 V^-1 (y - mu)` form.
    General,
}

/// Per-observation quantities needed by the likelihood and its derivatives,
/// all expressed with respect to the linear predictor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EtaTerms {
    pub mu: f64,
    pub log_density: f64,
    /// d log f / d eta.
    pub score: f64,
    /// -d^2 log f / d eta^2.
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FamilySpec {
    kind: FamilyKind,
    link: LinkKind,
}

struct MeanDerivs {
    mu: f64,
    /// 1 - mu, computed without cancellation (binomial only).
    comp: f64,
    d1: f64,
    d2: f64,
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

impl FamilySpec {
    pub fn new(kind: FamilyKind, link: LinkKind) -> Result<Self> {
        let ok = matches!(
            (kind, link),
            (FamilyKind::Binomial, LinkKind::Logit | LinkKind::Probit | LinkKind::Cloglog)
                | (FamilyKind::Poisson, LinkKind::Log)
        );
        if !ok {
            return Err(GlmmError::Config(format!(
                "link '{link}' is not available for family '{kind}'"
            )));
        }
        Ok(Self { kind, link })
    }

    pub fn binomial(link: LinkKind) -> Result<Self> {
        Self::new(FamilyKind::Binomial, link)
    }

    pub fn poisson() -> Self {
        Self { kind: FamilyKind::Poisson, link: LinkKind::Log }
    }

    /// Parses `("binomial", "probit")` style identifiers.
    pub fn parse(family: &str, link: &str) -> Result<Self> {
        Self::new(family.parse()?, link.parse()?)
    }

    pub fn kind(&self) -> FamilyKind {
        self.kind
    }

    pub fn link_kind(&self) -> LinkKind {
        self.link
    }

    pub fn canonical(&self) -> bool {
        matches!(
            (self.kind, self.link),
            (FamilyKind::Binomial, LinkKind::Logit) | (FamilyKind::Poisson, LinkKind::Log)
        )
    }

    /// `a(phi)`; one for both supported families.
    pub fn dispersion(&self) -> f64 {
        1.0
    }

    fn mean_derivs(&self, eta: f64) -> MeanDerivs {
        match self.link {
            LinkKind::Logit => {
                let (mu, comp) = if eta >= 0.0 {
                    let e = (-eta).exp();
                    (1.0 / (1.0 + e), e / (1.0 + e))
                } else {
                    let e = eta.exp();
                    (e / (1.0 + e), 1.0 / (1.0 + e))
                };
                let d1 = mu * comp;
                MeanDerivs { mu, comp, d1, d2: d1 * (comp - mu) }
            }
            LinkKind::Probit => {
                let d1 = std_normal_pdf(eta);
                MeanDerivs {
                    mu: std_normal_cdf(eta),
                    comp: std_normal_cdf(-eta),
                    d1,
                    d2: -eta * d1,
                }
            }
            LinkKind::Cloglog => {
                let e = eta.exp();
                let comp = (-e).exp();
                let d1 = e * comp;
                MeanDerivs { mu: -(-e).exp_m1(), comp, d1, d2: d1 * (1.0 - e) }
            }
            LinkKind::Log => {
                let mu = eta.exp();
                MeanDerivs { mu, comp: f64::NAN, d1: mu, d2: mu }
            }
        }
    }

    /// `g^-1(eta)`.
    pub fn inverse_link(&self, eta: f64) -> Result<f64> {
        if !eta.is_finite() {
            return Err(GlmmError::Domain(format!("linear predictor {eta} is not finite")));
        }
        Ok(self.mean_derivs(eta).mu)
    }

    fn check_interior(&self, mu: f64) -> Result<()> {
        let ok = match self.kind {
            FamilyKind::Binomial => mu > 0.0 && mu < 1.0,
            FamilyKind::Poisson => mu > 0.0 && mu.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(GlmmError::Domain(format!(
                "mean {mu} is not interior to the {} mean space",
                self.kind
            )))
        }
    }

    /// `g(mu)`.
    pub fn link(&self, mu: f64) -> Result<f64> {
        self.check_interior(mu)?;
        Ok(match self.link {
            LinkKind::Logit => (mu / (1.0 - mu)).ln(),
            LinkKind::Probit => Normal::standard().inverse_cdf(mu),
            LinkKind::Cloglog => (-(-mu).ln_1p()).ln(),
            LinkKind::Log => mu.ln(),
        })
    }

    /// `d eta / d mu` evaluated at `mu`.
    pub fn link_mu_derivative(&self, mu: f64) -> Result<f64> {
        self.check_interior(mu)?;
        Ok(match self.link {
            LinkKind::Logit => 1.0 / (mu * (1.0 - mu)),
            LinkKind::Probit => 1.0 / std_normal_pdf(Normal::standard().inverse_cdf(mu)),
            LinkKind::Cloglog => {
                let l = -(-mu).ln_1p();
                1.0 / ((1.0 - mu) * l)
            }
            LinkKind::Log => 1.0 / mu,
        })
    }

    /// `Var(mu)` (without the dispersion factor).
    pub fn variance_function(&self, mu: f64) -> Result<f64> {
        self.check_interior(mu)?;
        Ok(match self.kind {
            FamilyKind::Binomial => mu * (1.0 - mu),
            FamilyKind::Poisson => mu,
        })
    }

    /// Checks that `y` lies in the support of the family.
    pub fn check_response(&self, y: f64) -> Result<()> {
        let ok = match self.kind {
            FamilyKind::Binomial => y == 0.0 || y == 1.0,
            FamilyKind::Poisson => y >= 0.0 && y.fract() == 0.0 && y.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(GlmmError::Domain(format!("response {y} outside the {} support", self.kind)))
        }
    }

    /// `log f(y | mu)`.
    pub fn conditional_log_density(&self, y: f64, mu: f64) -> Result<f64> {
        self.check_response(y)?;
        self.check_interior(mu)?;
        Ok(match self.kind {
            FamilyKind::Binomial => {
                let mu = mu.clamp(MU_EPS, 1.0 - MU_EPS);
                if y == 1.0 {
                    mu.ln()
                } else {
                    (-mu).ln_1p()
                }
            }
            FamilyKind::Poisson => {
                let mu = mu.max(MU_EPS);
                y * mu.ln() - mu - ln_gamma(y + 1.0)
            }
        })
    }

    /// Log density, score and curvature with respect to `eta`.
    ///
    /// `y` is assumed to have been validated with [`Self::check_response`].
    pub fn eta_terms(&self, y: f64, eta: f64, path: ScorePath) -> EtaTerms {
        let m = self.mean_derivs(eta);
        match self.kind {
            FamilyKind::Binomial => {
                let mu = m.mu.clamp(MU_EPS, 1.0 - MU_EPS);
                let comp = m.comp.clamp(MU_EPS, 1.0 - MU_EPS);
                let log_density = if y == 1.0 { mu.ln() } else { comp.ln() };
                if m.mu < MU_EPS || m.comp < MU_EPS {
                    // the clamped density is flat in eta
                    return EtaTerms { mu, log_density, score: 0.0, weight: 0.0 };
                }
                let resid = y - mu;
                let var = mu * comp;
                if self.canonical() && path == ScorePath::Auto {
                    EtaTerms { mu, log_density, score: resid, weight: m.d1 }
                } else {
                    let dvar = 1.0 - 2.0 * mu;
                    let score = resid * m.d1 / var;
                    let weight = m.d1 * m.d1 / var
                        - resid * (m.d2 / var - m.d1 * m.d1 * dvar / (var * var));
                    EtaTerms { mu, log_density, score, weight }
                }
            }
            FamilyKind::Poisson => {
                let mu = m.mu.max(MU_EPS);
                let log_density = y * mu.ln() - mu - ln_gamma(y + 1.0);
                if m.mu < MU_EPS {
                    return EtaTerms { mu, log_density, score: 0.0, weight: 0.0 };
                }
                let resid = y - mu;
                if path == ScorePath::Auto {
                    EtaTerms { mu, log_density, score: resid, weight: m.d1 }
                } else {
                    // D^-1 V^-1 = d1 / mu
                    let score = resid * m.d1 / mu;
                    let weight = m.d1 * m.d1 / mu - resid * (m.d2 / mu - m.d1 * m.d1 / (mu * mu));
                    EtaTerms { mu, log_density, score, weight }
                }
            }
        }
    }
}

impl fmt::Display for FamilySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.kind, self.link)
    }
}
