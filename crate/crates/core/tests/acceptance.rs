//! End-to-end acceptance checks. Run with
//! `cargo test -p glmm-deriv --test acceptance`; prints one PASS/FAIL line
//! per criterion and a summary line. Failures make the process exit
//! non-zero only with `ACCEPTANCE_STRICT=1`, so the rest of the workspace
//! tests still run under `cargo test`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use glmm_deriv::estimation::{cluster_log_marginals, conditional_modes};
use glmm_deriv::family::FamilyKind;
use glmm_deriv::inference::sctest::{sctest, Functional, SctestOptions};
use glmm_deriv::inference::vuong::{vuong_lr_test, vuong_variance_test};
use glmm_deriv::quadrature::{adapt_rule, gh_rule, integrate_cluster};
use glmm_deriv::{
    estfun, fit, hessian, load_fitted, sandwich_vcov, FamilySpec, FitControl, FittedGlmm, GlmmData, LinkKind,
    Parameterization, RandomStructure, RelCovFactor,
};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use common::irt::rasch_oracle;
use common::simpson::simpson_cluster;
use common::{correlation, lsat7, rasch_data, simulate, simulate_epilepsy, simulate_rasch, testbeds, Testbed};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn structure_of(tb: &Testbed) -> RandomStructure {
    if tb.slope {
        RandomStructure::Unstructured
    } else {
        RandomStructure::Diagonal
    }
}

fn testbed_fits() -> Vec<(Testbed, FittedGlmm)> {
    testbeds()
        .into_iter()
        .enumerate()
        .map(|(k, tb)| {
            let data = simulate(&tb, 50, 8, 100 + k as u64);
            let f = fit(data, tb.family, structure_of(&tb), &FitControl::default()).expect("testbed fit");
            (tb, f)
        })
        .collect()
}

/// Casewise log-likelihoods at `(beta, params on the ranpar scale)`. With
/// `frozen` the quadrature stays anchored at the fit's modes and factors;
/// otherwise modes are re-solved at the new parameters.
fn llcont_at(f: &FittedGlmm, x: &[f64], ranpar: Parameterization, nagq: usize, frozen: bool) -> Vec<f64> {
    let p = f.beta.len();
    let beta = DVector::from_column_slice(&x[..p]);
    let rel = RelCovFactor::from_params(&x[p..], f.rel.q(), f.structure(), ranpar).expect("feasible perturbation");
    let fresh;
    let modes = if frozen {
        &f.modes
    } else {
        fresh = conditional_modes(&beta, &rel, &f.data, f.family).expect("modes");
        &fresh
    };
    cluster_log_marginals(&beta, &rel, &f.data, f.family, modes, nagq).expect("log marginals")
}

fn criterion_1(fits: &[(Testbed, FittedGlmm)]) -> Outcome {
    const M: usize = 7;
    const H: f64 = 1e-5;
    let mut worst_rel = 0.0f64;
    let mut worst_abs = 0.0f64;
    let mut resolved_rel = 0.0f64;
    let mut failures = Vec::new();
    for (tb, f) in fits {
        let scales: &[Parameterization] = if f.on_boundary() {
            &[Parameterization::Theta]
        } else {
            &[Parameterization::Theta, Parameterization::Var]
        };
        for &ranpar in scales {
            let scores = estfun(f, ranpar, M).expect("estfun");
            let x0: Vec<f64> = f.beta.iter().copied().chain(f.rel.params(ranpar)).collect();
            for j in 0..x0.len() {
                let (mut xp, mut xm) = (x0.clone(), x0.clone());
                xp[j] += H;
                xm[j] -= H;
                let (lp, lm) = (llcont_at(f, &xp, ranpar, M, true), llcont_at(f, &xm, ranpar, M, true));
                let (rp, rm) = (llcont_at(f, &xp, ranpar, M, false), llcont_at(f, &xm, ranpar, M, false));
                for i in 0..lp.len() {
                    let s = scores.values[(i, j)];
                    if s.abs() >= 1e-3 {
                        resolved_rel = resolved_rel.max(((rp[i] - rm[i]) / (2.0 * H) - s).abs() / s.abs());
                    }
                    let fd = (lp[i] - lm[i]) / (2.0 * H);
                    let err = (fd - s).abs();
                    let ok = if s.abs() < 1e-3 {
                        worst_abs = worst_abs.max(err);
                        err <= 1e-4
                    } else {
                        worst_rel = worst_rel.max(err / s.abs());
                        err <= 1e-6 * s.abs()
                    };
                    if !ok && failures.len() < 5 {
                        failures.push(format!(
                            "{} {ranpar} {} cluster {i}: score {s:.10e} fd {fd:.10e}",
                            tb.name, scores.labels[j]
                        ));
                    }
                }
            }
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "anchors at the fit: max rel err {worst_rel:.2e}, max abs err (small scores) {worst_abs:.2e}; \
             modes re-solved per perturbation (not gated): max rel err {resolved_rel:.2e}; {}",
            failures.join("; ")
        ),
    )
}

fn criterion_2(fits: &[(Testbed, FittedGlmm)]) -> Outcome {
    // highest supported rule; at M=20 the quadrature error is still ~1e-8
    const M: usize = 25;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (_, f) in fits.iter().filter(|(tb, _)| !tb.slope) {
        let scores = estfun(f, Parameterization::Theta, M).expect("estfun");
        let ll = cluster_log_marginals(&f.beta, &f.rel, &f.data, f.family, &f.modes, M).expect("llcont");
        let lambda = f.rel.lambda()[(0, 0)];
        for _ in 0..10 {
            let i = rng.random_range(0..f.data.n_clusters());
            let s = simpson_cluster(f.data.cluster(i), f.family, f.beta.as_slice(), lambda, 8.0, 10_000);
            let mut diffs = vec![(ll[i] - s.loglik).abs()];
            diffs.extend(s.beta.iter().enumerate().map(|(j, v)| (scores.values[(i, j)] - v).abs()));
            diffs.push((scores.values[(i, f.beta.len())] - s.lambda).abs());
            let d = diffs.iter().copied().fold(0.0, f64::max);
            if d > worst {
                worst = d;
            }
            checked += 1;
        }
    }
    outcome(worst <= 1e-8, format!("{checked} clusters, max abs deviation {worst:.2e} (M={M})"))
}

fn normal_moment(k: u32) -> f64 {
    if k % 2 == 1 {
        0.0
    } else {
        (1..k).step_by(2).map(|v| v as f64).product()
    }
}

fn binomial(n: u32, k: u32) -> f64 {
    (0..k).map(|i| (n - i) as f64 / (i + 1) as f64).product()
}

/// `E[u_1^k1 u_2^k2]` for `u = b + C z`, `C` lower triangular, by expansion.
fn moment_2d(b: &[f64; 2], c: &[[f64; 2]; 2], k1: u32, k2: u32) -> f64 {
    // u1 = b1 + c11 z1; u2 = b2 + c21 z1 + c22 z2
    let mut total = 0.0;
    for a in 0..=k1 {
        let t1 = binomial(k1, a) * b[0].powi((k1 - a) as i32) * c[0][0].powi(a as i32);
        for e in 0..=k2 {
            let t2 = binomial(k2, e) * b[1].powi((k2 - e) as i32);
            for g in 0..=e {
                let t3 = binomial(e, g) * c[1][0].powi(g as i32) * c[1][1].powi((e - g) as i32);
                total += t1 * t2 * t3 * normal_moment(a + g) * normal_moment(e - g);
            }
        }
    }
    total
}

fn criterion_3() -> Outcome {
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    let g_hat = |d: usize| DMatrix::<f64>::identity(d, d);
    for m in 1..=10usize {
        for d in 1..=2usize {
            let rule = gh_rule(m, d).expect("rule");
            let (b, c) = ([0.3, -0.2], [[0.7, 0.0], [0.2, 0.5]]);
            let bt = DVector::from_column_slice(&b[..d]);
            let ct = DMatrix::from_fn(d, d, |r, s| c[r][s]);
            let adapted = adapt_rule(&rule, &bt, &ct, &g_hat(d)).expect("adapt");
            let cov = &ct * ct.transpose();
            let chol_inv = cov.clone().try_inverse().expect("invertible");
            let det = cov.determinant();
            // integrand: monomial times the N(b, CC') density over the N(0, I) prior
            let ratio = |u: &[f64]| {
                let du = DVector::from_fn(d, |r, _| u[r] - b[r]);
                let q_post = (du.transpose() * &chol_inv * &du)[(0, 0)];
                let q_prior: f64 = u.iter().map(|v| v * v).sum();
                (-0.5 * q_post + 0.5 * q_prior).exp() / det.sqrt()
            };
            let max_deg = 2 * m as u32 - 1;
            let degrees: Vec<(u32, u32)> = if d == 1 {
                (0..=max_deg).map(|k| (k, 0)).collect()
            } else {
                (0..=max_deg).flat_map(|k1| (0..=max_deg - k1).map(move |k2| (k1, k2))).collect()
            };
            for (k1, k2) in degrees {
                let mono = |u: &[f64]| u[0].powi(k1 as i32) * if d == 2 { u[1].powi(k2 as i32) } else { 1.0 };
                let got = integrate_cluster(|u| mono(u) * ratio(u), &adapted).expect("integrate");
                let size = integrate_cluster(|u| mono(u).abs() * ratio(u), &adapted).expect("integrate");
                let want = if d == 1 { moment_2d(&b, &c, k1, 0) } else { moment_2d(&b, &c, k1, k2) };
                let err = (got - want).abs() / size.max(1.0);
                worst = worst.max(err);
                if err > 1e-10 && failures.len() < 5 {
                    failures.push(format!("M={m} d={d} degree ({k1},{k2}): {got} vs {want}"));
                }
            }
        }
    }
    outcome(failures.is_empty(), format!("max scaled error {worst:.2e}; {}", failures.join("; ")))
}

fn criterion_4() -> Outcome {
    let data = simulate_epilepsy(59);
    let f = fit(data, FamilySpec::poisson(), RandomStructure::Unstructured, &FitControl::default()).expect("fit");
    // per M: log-likelihood; for M >= 5 also gradient / parameter SE on the var and theta
    // scales, and the scale-free gradient / sqrt(meat diagonal)
    let mut ll = Vec::new();
    let mut by_se = Vec::new();
    let mut by_se_theta = Vec::new();
    let mut by_meat = Vec::new();
    for m in 1..=10usize {
        let l: f64 = cluster_log_marginals(&f.beta, &f.rel, &f.data, f.family, &f.modes, m)
            .expect("llcont")
            .iter()
            .sum();
        ll.push(l);
        if m < 5 {
            continue;
        }
        for (ranpar, out) in [(Parameterization::Var, &mut by_se), (Parameterization::Theta, &mut by_se_theta)] {
            let g = estfun(&f, ranpar, m).expect("estfun").column_sums();
            let sw = sandwich_vcov(&f, ranpar, m).expect("sandwich");
            out.push(g.component_div(&sw.robust_se));
            if ranpar == Parameterization::Var {
                by_meat.push(DVector::from_fn(g.len(), |j, _| g[j] / sw.b[(j, j)].sqrt()));
            }
        }
    }
    let drift = |series: &[DVector<f64>]| -> (f64, bool) {
        let mut worst = 0.0f64;
        let mut monotone = true;
        let mut prev = f64::INFINITY;
        for m in 5..=10usize {
            let d = (&series[m - 5] - &series[5]).amax();
            worst = worst.max(d);
            monotone &= d <= prev + 1e-12;
            prev = d;
        }
        (worst, monotone)
    };
    let ll_drift = (5..=10usize).map(|m| (ll[m - 1] - ll[9]).abs()).fold(0.0, f64::max);
    let (g_drift, monotone) = drift(&by_se);
    let (theta_drift, _) = drift(&by_se_theta);
    let (meat_drift, _) = drift(&by_meat);
    let from6 = (6..=10usize).map(|m| (&by_se[m - 5] - &by_se[5]).amax()).fold(0.0, f64::max);
    let intercept: Vec<String> = by_se.iter().map(|g| format!("{:.4}", g[0])).collect();
    outcome(
        ll_drift < 1e-3 && g_drift < 0.01,
        format!(
            "M>=5: max |l(M)-l(10)| {ll_drift:.2e}; gradient/SE drift (var scale) {g_drift:.2e} \
             (M>=6: {from6:.2e}, non-increasing: {monotone}), theta scale {theta_drift:.2e}, \
             gradient/sqrt(meat) {meat_drift:.2e}; intercept gradient/SE for M=5..10: [{}]",
            intercept.join(", ")
        ),
    )
}

fn criterion_5() -> Outcome {
    let data = rasch_data(&lsat7());
    let logit = FamilySpec::binomial(LinkKind::Logit).expect("family");
    let f = fit(data, logit, RandomStructure::Diagonal, &FitControl::default()).expect("fit");
    let sw = sandwich_vcov(&f, Parameterization::Var, 5).expect("sandwich");
    let robust = [0.0996, 0.0814, 0.0898, 0.0785, 0.1058, 0.1311];
    let model = [0.1004, 0.0811, 0.0913, 0.0787, 0.1037, 0.1300];
    let dr = sw.robust_se.iter().zip(&robust).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let dm = sw.model_se.iter().zip(&model).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let fmt = |v: &DVector<f64>| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ");
    outcome(
        dr <= 0.002 && dm <= 0.002,
        format!(
            "robust ({}) max diff {dr:.4}; model ({}) max diff {dm:.4}",
            fmt(&sw.robust_se),
            fmt(&sw.model_se)
        ),
    )
}

fn criterion_6() -> Outcome {
    let easiness = [1.2, 0.4, 0.0, -0.5, -1.1];
    let responses = simulate_rasch(1000, &easiness, 1.0, 6);
    let data = rasch_data(&responses);
    let logit = FamilySpec::binomial(LinkKind::Logit).expect("family");
    let f = fit(data, logit, RandomStructure::Diagonal, &FitControl::default()).expect("fit");
    let scores = estfun(&f, Parameterization::Var, 5).expect("estfun");
    let sigma2 = f.rel.params(Parameterization::Var)[0];
    let oracle = rasch_oracle(&responses, f.beta.as_slice(), sigma2);
    let mut max_dev = 0.0f64;
    let mut min_cor = 1.0f64;
    for j in 0..scores.values.ncols() {
        let ours: Vec<f64> = scores.values.column(j).iter().copied().collect();
        let theirs: Vec<f64> = oracle.scores.iter().map(|s| s[j]).collect();
        for (a, b) in ours.iter().zip(&theirs) {
            max_dev = max_dev.max((a - b).abs());
        }
        min_cor = min_cor.min(correlation(&ours, &theirs));
    }
    outcome(
        max_dev <= 1e-3 && min_cor >= 0.99999,
        format!("max abs deviation {max_dev:.2e}, min correlation {min_cor:.8}"),
    )
}

fn criterion_7() -> Outcome {
    let tb = testbeds()[0];
    let reps = 200;
    let results: Vec<(bool, bool)> = (0..reps)
        .map(|r| {
            let data = simulate(&tb, 100, 8, 7_000 + r as u64);
            let f = fit(data, tb.family, RandomStructure::Diagonal, &FitControl::default()).expect("fit");
            let mut rng = ChaCha8Rng::seed_from_u64(70_000 + r as u64);
            let order: Vec<f64> = (0..100).map(|_| rng.random::<f64>()).collect();
            let ranpar = if f.on_boundary() { Parameterization::Theta } else { Parameterization::Var };
            let test = |functional| {
                let opts = SctestOptions { functional, ranpar, seed: 1, ..Default::default() };
                sctest(&f, &order, &opts, 5).expect("sctest").p_value < 0.05
            };
            (test(Functional::Dm), test(Functional::MaxLm))
        })
        .collect();
    let dm = results.iter().filter(|r| r.0).count() as f64 / reps as f64;
    let lm = results.iter().filter(|r| r.1).count() as f64 / reps as f64;
    let inside = |v: f64| (0.01..=0.09).contains(&v);
    outcome(inside(dm) && inside(lm), format!("rejection rates over {reps} replications: DM {dm:.3}, maxLM {lm:.3}"))
}

/// Poisson random-intercept data with two covariates; the second has
/// coefficient `gamma`.
fn nested_pair_data(seed: u64, gamma: f64) -> (Arc<GlmmData>, Arc<GlmmData>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (clusters, size) = (50, 8);
    let n = clusters * size;
    let x = DMatrix::from_fn(n, 3, |_, j| if j == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
    let std = Normal::new(0.0, 1.0).expect("normal");
    let mut y = Vec::with_capacity(n);
    for c in 0..clusters {
        let b: f64 = 0.6 * std.sample(&mut rng);
        for r in c * size..(c + 1) * size {
            let eta: f64 = 0.5 + 0.4 * x[(r, 1)] + gamma * x[(r, 2)] + b;
            y.push(Poisson::new(eta.exp()).expect("poisson").sample(&mut rng));
        }
    }
    let z = DMatrix::from_element(n, 1, 1.0);
    let g: Vec<String> = (0..n).map(|r| format!("c{}", r / size)).collect();
    let full = GlmmData::new(&y, &x, &z, &g).expect("data");
    let reduced = GlmmData::new(&y, &x.columns(0, 2).into_owned(), &z, &g).expect("data");
    (Arc::new(full), Arc::new(reduced))
}

fn criterion_8() -> Outcome {
    let pois = FamilySpec::poisson();
    let ctl = FitControl::default();
    let (full, _) = nested_pair_data(80, 0.0);
    let f = fit(full, pois, RandomStructure::Diagonal, &ctl).expect("fit");
    let same = vuong_variance_test(&f, &f.clone(), 5).expect("variance test");
    let mut rejections = 0;
    for r in 0..100u64 {
        let (full, reduced) = nested_pair_data(8_000 + r, 0.5);
        let fa = fit(full, pois, RandomStructure::Diagonal, &ctl).expect("fit");
        let fb = fit(reduced, pois, RandomStructure::Diagonal, &ctl).expect("fit");
        let lr = vuong_lr_test(&fa, &fb, true, 5).expect("lr test");
        if lr.p_value < 0.01 {
            rejections += 1;
        }
    }
    outcome(
        same.omega2 == 0.0 && rejections >= 95,
        format!("identical models omega2 = {:e}; nested power {rejections}/100", same.omega2),
    )
}

fn criterion_9(fits: &[(Testbed, FittedGlmm)]) -> Outcome {
    // Poisson GLM slice: Lambda = 0 leaves the fixed-effects information
    let (_, pf) = fits.iter().find(|(tb, _)| tb.family.kind() == FamilyKind::Poisson && !tb.slope).expect("testbed");
    let glm = load_fitted(&[0.4, 0.3], &[0.0], RandomStructure::Diagonal, pf.data.clone(), pf.family, 5)
        .expect("load");
    let h = hessian(&glm, Parameterization::Theta, 5).expect("hessian");
    let mut info = DMatrix::zeros(2, 2);
    for block in pf.data.clusters() {
        for r in 0..block.y.len() {
            let xr = block.x.row(r).transpose();
            let mu = (0.4 * xr[0] + 0.3 * xr[1]).exp();
            info += &xr * xr.transpose() * mu;
        }
    }
    let slice = h.matrix.view((0, 0), (2, 2)).into_owned();
    let rel = (&slice + &info).amax() / info.amax();
    let mut detail = vec![format!("GLM slice rel err {rel:.2e}; symmetry at M={M}")];
    let mut pass = rel <= 1e-5;
    // The gradient differenced here re-solves modes, so its Jacobian carries
    // the quadrature error's dependence on the anchor and is only symmetric
    // up to that error: ~1e-4..5e-3 relative at 5 points, below 1e-5 at 15.
    const M: usize = 15;
    for (tb, f) in fits {
        let ranpar = if f.on_boundary() { Parameterization::Theta } else { Parameterization::Var };
        let h = hessian(f, ranpar, M).expect("hessian");
        let asym = h.asymmetry / h.matrix.amax();
        let top = SymmetricEigen::new(h.matrix.clone()).eigenvalues.max();
        let h5 = hessian(f, ranpar, 5).expect("hessian");
        let top5 = SymmetricEigen::new(h5.matrix.clone()).eigenvalues.max();
        let interior = !f.on_boundary();
        pass &= asym < 1e-5 && (!interior || (top < 0.0 && top5 < 0.0));
        detail.push(format!(
            "{}: asym {asym:.1e} (M=5: {:.1e}), max eig {top:.3e} (M=5: {top5:.3e}){}",
            tb.name,
            h5.asymmetry / h5.matrix.amax(),
            if interior { "" } else { " (boundary)" }
        ));
    }
    outcome(pass, detail.join("; "))
}

fn report(failed: &mut Vec<usize>, n: usize, name: &str, limit: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f));
    let elapsed = start.elapsed();
    let (pass, detail) = match result {
        Ok(o) => (o.pass, o.detail),
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    };
    let timely = elapsed <= limit;
    let ok = pass && timely;
    println!(
        "criterion {n} ({name}): {} [{:.1}s of {:.0}s] {detail}",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.as_secs_f64()
    );
    if !ok {
        failed.push(n);
    }
    ok
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| only.is_empty() || only.contains(&n);
    let needs_fits = [1, 2, 9].iter().any(|&n| wanted(n));
    let fits_start = Instant::now();
    let fits = if needs_fits { testbed_fits() } else { Vec::new() };
    let fit_time = fits_start.elapsed();
    let mins = |m: u64| Duration::from_secs(60 * m);
    let mut all = true;
    let mut failed = Vec::new();
    if wanted(1) {
        all &= report(&mut failed, 1, "finite-difference oracle", mins(2), || {
            let t = Instant::now();
            let mut o = criterion_1(&fits);
            o.detail = format!("{} (testbed fits {:.1}s, checks {:.1}s)", o.detail, fit_time.as_secs_f64(), t.elapsed().as_secs_f64());
            o
        });
    }
    if wanted(2) {
        all &= report(&mut failed, 2, "brute-force integration oracle", Duration::from_secs(30), || criterion_2(&fits));
    }
    if wanted(3) {
        all &= report(&mut failed, 3, "quadrature exactness", mins(1), criterion_3);
    }
    if wanted(4) {
        all &= report(&mut failed, 4, "quadrature stabilization", mins(1), criterion_4);
    }
    if wanted(5) {
        all &= report(&mut failed, 5, "LSAT7 standard errors", mins(5), criterion_5);
    }
    if wanted(6) {
        all &= report(&mut failed, 6, "Rasch oracle equivalence", mins(5), criterion_6);
    }
    if wanted(7) {
        all &= report(&mut failed, 7, "score-test size", mins(10), criterion_7);
    }
    if wanted(8) {
        all &= report(&mut failed, 8, "Vuong degeneracy and power", mins(10), criterion_8);
    }
    if wanted(9) {
        all &= report(&mut failed, 9, "Hessian checks", mins(2), || criterion_9(&fits));
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: FAILED criteria {failed:?}");
    }
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if !all && strict {
        std::process::exit(1);
    }
}
