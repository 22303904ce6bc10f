//! Subcommand implementations.

use std::path::{Path, PathBuf};

use glmm_deriv::inference::chisq::weighted_chisq_sf_mc;
use glmm_deriv::model_data::{covariance_labels, theta_positions};
use glmm_deriv::{
    estfun, fit, hessian, load_fitted, sandwich_vcov, sctest, vuong_lr_test, vuong_variance_test, FitControl,
    FittedGlmm, Functional, GlmmError, Parameterization, RandomStructure, SctestOptions,
};
use nalgebra::DMatrix;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::config::ModelConfig;
use crate::error::{CliError, Result};
use crate::ingest::{ingest_csv, Ingested};
use crate::output::{matrix, metadata, num, nums, write_csv, write_json};
use crate::{ChisqMethod, Command, FitInput, FunctionalArg};

pub fn dispatch(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Fit { data, config, nagq, out } => run_fit(data, config, *nagq, out),
        Command::Scores { input, ranpar, nagq, out } => {
            let (f, _) = load_fit(input)?;
            let s = estfun(&f, (*ranpar).into(), *nagq)?;
            write_csv(out, &s.labels, &s.values)
        }
        Command::Hessian { input, ranpar, nagq, out } => {
            let (f, _) = load_fit(input)?;
            let ranpar: Parameterization = (*ranpar).into();
            let h = hessian(&f, ranpar, *nagq)?;
            let v = json!({
                "metadata": metadata("hessian", None, *nagq, Some(&ranpar.to_string())),
                "labels": h.labels,
                "matrix": matrix(&h.matrix),
                "asymmetry": num(h.asymmetry),
                "one_sided": h.one_sided,
            });
            write_json(out, &v)
        }
        Command::Sandwich { input, ranpar, nagq, out } => {
            let (f, _) = load_fit(input)?;
            let ranpar: Parameterization = (*ranpar).into();
            let s = sandwich_vcov(&f, ranpar, *nagq)?;
            let (_, model_vcov) = glmm_deriv::inference::sandwich::sandwich_from_parts(&s.a, &s.b)?;
            let estimates: Vec<f64> = f.beta.iter().copied().chain(f.rel.params(ranpar)).collect();
            let v = json!({
                "metadata": metadata("sandwich", None, *nagq, Some(&ranpar.to_string())),
                "labels": s.labels,
                "estimates": nums(&estimates),
                "robust_se": nums(s.robust_se.iter()),
                "model_se": nums(s.model_se.iter()),
                "vcov": matrix(&s.v),
                "model_vcov": matrix(&model_vcov),
                "bread": matrix(&s.a),
                "meat": matrix(&s.b),
            });
            write_json(out, &v)
        }
        Command::Sctest {
            input,
            order_by,
            parm,
            functional,
            seed,
            replications,
            trim,
            ranpar,
            nagq,
            out,
            path_out,
        } => {
            let (f, ing) = load_fit(input)?;
            let order = ing.cluster_values(order_by)?;
            let opts = SctestOptions {
                functional: match functional {
                    FunctionalArg::Dm => Functional::Dm,
                    FunctionalArg::Cvm => Functional::Cvm,
                    FunctionalArg::Maxlm => Functional::MaxLm,
                    FunctionalArg::Maxlmo => Functional::MaxLmo,
                },
                parm: parm.clone(),
                trim: *trim,
                replications: *replications,
                seed: *seed,
                ranpar: (*ranpar).into(),
            };
            if let Some(bad) = opts.parm.iter().flatten().find(|&&j| j >= f.n_params()) {
                return Err(CliError::Config(format!("parameter index {bad} out of range ({} parameters)", f.n_params())));
            }
            let r = sctest(&f, &order, &opts, *nagq)?;
            let all_labels: Vec<String> = f
                .data
                .fixed_names()
                .iter()
                .cloned()
                .chain(covariance_labels(f.data.random_names(), f.structure(), opts.ranpar))
                .collect();
            let labels: Vec<String> = r.parm.iter().map(|&j| all_labels[j].clone()).collect();
            let path_file = path_out.clone().unwrap_or_else(|| default_path_file(out));
            let mut header = vec!["t".to_string()];
            header.extend(labels.iter().cloned());
            let mut table = DMatrix::zeros(r.path.t.len(), labels.len() + 1);
            table.set_column(0, &nalgebra::DVector::from_column_slice(&r.path.t));
            table.columns_mut(1, labels.len()).copy_from(&r.path.values);
            write_csv(&path_file, &header, &table)?;
            let v = json!({
                "metadata": metadata("sctest", Some(*seed), *nagq, Some(&opts.ranpar.to_string())),
                "functional": r.functional.to_string(),
                "order_by": order_by,
                "n_clusters": f.data.n_clusters(),
                "parm": r.parm,
                "parm_labels": labels,
                "statistic": num(r.statistic),
                "p_value": num(r.p_value),
                "replications": replications,
                "critical_value_5pct": num(r.critical_value),
                "crossings": nums(&r.crossings),
                "path_file": path_file.to_string_lossy(),
            });
            write_json(out, &v)
        }
        Command::Vuong { fit1, fit2, data, nested, seed, method, draws, nagq, out } => {
            let (a, _) = load_fit(&FitInput { fit: fit1.clone(), data: data.clone() })?;
            let (b, _) = load_fit(&FitInput { fit: fit2.clone(), data: data.clone() })?;
            run_vuong(&a, &b, *nested, *seed, *method, *draws, *nagq, out)
        }
    }
}

fn default_path_file(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "sctest".into());
    let name = format!("{stem}_path.csv");
    match out.parent() {
        Some(p) if out.as_os_str() != "-" => p.join(name),
        _ => PathBuf::from(name),
    }
}

fn read_config(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    ModelConfig::from_json(&text)
}

fn run_fit(data: &Path, config: &Path, nagq: Option<usize>, out: &Path) -> Result<()> {
    let cfg = read_config(config)?;
    if nagq == Some(0) {
        return Err(CliError::Config("--nagq must be at least 1".into()));
    }
    let family = cfg.family_spec()?;
    let ing = ingest_csv(data, &cfg)?;
    let control = FitControl { nagq: nagq.or(cfg.nagq), optimizer: cfg.optimizer.options(), ..Default::default() };
    let f = fit(ing.data.clone(), family, cfg.structure, &control)?;
    write_json(out, &fit_json(&f, &cfg, &ing))
}

fn fit_json(f: &FittedGlmm, cfg: &ModelConfig, ing: &Ingested) -> Value {
    let d = &f.data;
    let positions: Vec<[usize; 2]> = theta_positions(d.q(), f.structure()).into_iter().map(|(r, c)| [r, c]).collect();
    let modes: Vec<Value> = f
        .modes
        .iter()
        .zip(d.cluster_labels())
        .map(|(m, label)| {
            let b = f.rel.lambda() * &m.mode;
            json!({ "cluster": label, "u": nums(m.mode.iter()), "b": nums(b.iter()) })
        })
        .collect();
    let c = &f.convergence;
    json!({
        "metadata": metadata("fit", cfg.seed, f.nagq, Some("theta")),
        "config": cfg,
        "family": f.family.kind().to_string(),
        "link": f.family.link_kind().to_string(),
        "structure": f.structure(),
        "nagq": f.nagq,
        "data": {
            "n_obs": d.n_obs(),
            "n_clusters": d.n_clusters(),
            "dropped_rows": ing.dropped_rows,
        },
        "beta_labels": d.fixed_names(),
        "beta": nums(f.beta.iter()),
        "theta_labels": covariance_labels(d.random_names(), f.structure(), Parameterization::Theta),
        "theta": nums(f.theta()),
        "theta_ordering": {
            "description": "free entries of the lower-triangular relative covariance factor Lambda, column-major; G = sigma^2 Lambda Lambda' with sigma^2 = 1 for binomial and Poisson",
            "random_names": d.random_names(),
            "positions": positions,
        },
        "covariance": {
            "labels": covariance_labels(d.random_names(), f.structure(), Parameterization::Var),
            "values": nums(&f.rel.params(Parameterization::Var)),
        },
        "loglik": num(f.loglik),
        "convergence": {
            "optimized": c.optimized,
            "converged": c.converged,
            "evaluations": c.evaluations,
            "restarts": c.restarts,
            "gradient_norm": num(c.gradient_norm),
            "boundary": c.boundary,
        },
        "modes": modes,
    })
}

#[derive(Deserialize)]
struct FitRecord {
    config: ModelConfig,
    structure: RandomStructure,
    nagq: usize,
    beta_labels: Vec<String>,
    beta: Vec<f64>,
    theta: Vec<f64>,
    data: DataSummary,
}

#[derive(Deserialize)]
struct DataSummary {
    n_clusters: usize,
}

/// Rebuilds a fitted model from a fit JSON and the data it was fitted to.
pub fn load_fit(input: &FitInput) -> Result<(FittedGlmm, Ingested)> {
    let text = std::fs::read_to_string(&input.fit)
        .map_err(|e| CliError::Config(format!("cannot read fit {}: {e}", input.fit.display())))?;
    let rec: FitRecord = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{} is not a fit result: {e}", input.fit.display())))?;
    rec.config.validate()?;
    if rec.config.structure != rec.structure {
        return Err(CliError::Config("fit file structure disagrees with its config".into()));
    }
    let ing = ingest_csv(&input.data, &rec.config)?;
    if ing.data.fixed_names() != rec.beta_labels.as_slice() || ing.data.n_clusters() != rec.data.n_clusters {
        return Err(CliError::Config(format!(
            "{} does not match the data the fit was made on",
            input.data.display()
        )));
    }
    let f = load_fitted(&rec.beta, &rec.theta, rec.structure, ing.data.clone(), rec.config.family_spec()?, rec.nagq)?;
    Ok((f, ing))
}

#[allow(clippy::too_many_arguments)]
fn run_vuong(
    a: &FittedGlmm,
    b: &FittedGlmm,
    nested: bool,
    seed: u64,
    method: ChisqMethod,
    draws: usize,
    nagq: usize,
    out: &Path,
) -> Result<()> {
    let var = vuong_variance_test(a, b, nagq)?;
    let sf = |x: f64, w: &[f64], imhof: f64| match method {
        ChisqMethod::Imhof => imhof,
        ChisqMethod::Mc => weighted_chisq_sf_mc(x, w, draws, seed),
    };
    let squares: Vec<f64> = var.eigenvalues.iter().map(|v| v * v).collect();
    let var_p = if var.statistic == 0.0 { 1.0 } else { sf(var.statistic, &squares, var.p_value) };

    let (lr, note) = match vuong_lr_test(a, b, nested, nagq) {
        Ok(r) if r.nested => {
            let w: Vec<f64> = r.eigenvalues.iter().map(|v| -v).collect();
            let p = sf(r.statistic, &w, r.p_value);
            (json!({ "nested": true, "loglik_ratio": num(r.loglik_ratio), "statistic": num(r.statistic), "p_value": num(p) }), None)
        }
        Ok(r) => (
            json!({
                "nested": false,
                "loglik_ratio": num(r.loglik_ratio),
                "statistic": num(r.statistic),
                "p_value": num(r.p_value),
                "p_value_fit2": num(r.p_value_b.unwrap_or(f64::NAN)),
            }),
            None,
        ),
        Err(GlmmError::Degenerate(m)) => (Value::Null, Some(m)),
        Err(e) => return Err(e.into()),
    };
    let v = json!({
        "metadata": metadata("vuong", Some(seed), nagq, Some("theta")),
        "method": match method { ChisqMethod::Imhof => "imhof", ChisqMethod::Mc => "mc" },
        "n_clusters": a.data.n_clusters(),
        "eigenvalues": nums(&var.eigenvalues),
        "variance_test": {
            "omega2": num(var.omega2),
            "statistic": num(var.statistic),
            "p_value": num(var_p),
        },
        "lr_test": lr,
        "lr_test_note": note,
    });
    write_json(out, &v)
}
