//! JSON model configuration.

use glmm_deriv::optim::NelderMeadOptions;
use glmm_deriv::{FamilySpec, RandomStructure};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{CliError, Result};

/// A model term as written in the config: `1`, `0`, `x`, `a*b` or `a:b`.
/// Integers are accepted for the intercept markers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct TermSpec(pub String);

impl<'de> Deserialize<'de> for TermSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(i64),
            Str(String),
        }
        Ok(match Raw::deserialize(d)? {
            Raw::Int(i) => TermSpec(i.to_string()),
            Raw::Str(s) => TermSpec(s.trim().to_string()),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_evals: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_step: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_restarts: Option<usize>,
}

impl OptimizerConfig {
    pub fn options(&self) -> NelderMeadOptions {
        let mut o = NelderMeadOptions::default();
        if let Some(v) = self.max_evals {
            o.max_evals = v;
        }
        if let Some(v) = self.f_tol {
            o.f_tol = v;
        }
        if let Some(v) = self.x_tol {
            o.x_tol = v;
        }
        if let Some(v) = self.initial_step {
            o.initial_step = v;
        }
        if let Some(v) = self.max_restarts {
            o.max_restarts = v;
        }
        o
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub response: String,
    pub fixed: Vec<TermSpec>,
    pub random: Vec<TermSpec>,
    pub cluster: String,
    pub family: String,
    /// Defaults to the canonical link.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link: Option<String>,
    #[serde(default)]
    pub structure: RandomStructure,
    #[serde(rename = "nAGQ", default, skip_serializing_if = "Option::is_none")]
    pub nagq: Option<usize>,
    /// Columns treated as categorical even when their values are numeric.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub factors: Vec<String>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// A parsed term of the linear predictor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Term {
    Main(String),
    Product(String, String),
}

impl Term {
    pub fn columns(&self) -> Vec<&str> {
        match self {
            Term::Main(a) => vec![a],
            Term::Product(a, b) => vec![a, b],
        }
    }
}

/// Intercept flag and expanded terms; `a*b` becomes `a`, `b`, `a:b`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TermList {
    pub intercept: bool,
    pub terms: Vec<Term>,
}

impl TermList {
    pub fn parse(specs: &[TermSpec], what: &str) -> Result<Self> {
        let mut one = false;
        let mut zero = false;
        let mut terms: Vec<Term> = Vec::new();
        let push = |t: Term, terms: &mut Vec<Term>| {
            if !terms.contains(&t) {
                terms.push(t);
            }
        };
        for TermSpec(s) in specs {
            match s.as_str() {
                "1" => one = true,
                "0" | "-1" => zero = true,
                _ => {
                    let (op, parts): (char, Vec<&str>) = if s.contains('*') {
                        ('*', s.split('*').map(str::trim).collect())
                    } else {
                        (':', s.split(':').map(str::trim).collect())
                    };
                    if parts.iter().any(|p| p.is_empty()) {
                        return Err(CliError::Config(format!("malformed {what} term '{s}'")));
                    }
                    match parts.as_slice() {
                        [a] => push(Term::Main(a.to_string()), &mut terms),
                        [a, b] if a == b => {
                            return Err(CliError::Config(format!("{what} term '{s}' multiplies a column by itself")))
                        }
                        [a, b] => {
                            if op == '*' {
                                push(Term::Main(a.to_string()), &mut terms);
                                push(Term::Main(b.to_string()), &mut terms);
                            }
                            push(Term::Product(a.to_string(), b.to_string()), &mut terms);
                        }
                        _ => {
                            return Err(CliError::Config(format!(
                                "{what} term '{s}': only pairwise products are supported"
                            )))
                        }
                    }
                }
            }
        }
        if one && zero {
            return Err(CliError::Config(format!("{what} terms request and suppress the intercept")));
        }
        if !one && terms.is_empty() {
            return Err(CliError::Config(format!("{what} part of the model is empty")));
        }
        Ok(Self { intercept: one, terms })
    }
}

impl ModelConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(format!("model config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nagq == Some(0) {
            return Err(CliError::Config("nAGQ must be at least 1".into()));
        }
        self.family_spec()?;
        TermList::parse(&self.fixed, "fixed")?;
        TermList::parse(&self.random, "random")?;
        Ok(())
    }

    pub fn family_spec(&self) -> Result<FamilySpec> {
        let link = match (&self.link, self.family.as_str()) {
            (Some(l), _) => l.clone(),
            (None, "binomial") => "logit".into(),
            (None, "poisson") => "log".into(),
            (None, other) => return Err(CliError::Config(format!("unknown family '{other}'"))),
        };
        Ok(FamilySpec::parse(&self.family, &link)?)
    }

    /// Every column the model reads, response and cluster first.
    pub fn referenced_columns(&self) -> Result<Vec<String>> {
        let mut cols = vec![self.response.clone(), self.cluster.clone()];
        for list in [TermList::parse(&self.fixed, "fixed")?, TermList::parse(&self.random, "random")?] {
            for t in &list.terms {
                for c in t.columns() {
                    if !cols.iter().any(|x| x == c) {
                        cols.push(c.to_string());
                    }
                }
            }
        }
        Ok(cols)
    }
}
