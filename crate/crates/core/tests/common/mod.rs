#![allow(dead_code)]

pub mod irt;
pub mod simpson;

use std::path::PathBuf;
use std::sync::Arc;

use glmm_deriv::family::{FamilySpec, LinkKind};
use glmm_deriv::model_data::GlmmData;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

#[derive(Debug, Clone, Copy)]
pub struct Testbed {
    pub name: &'static str,
    pub family: FamilySpec,
    pub slope: bool,
}

/// Binomial logit/probit and Poisson log, each with a random intercept and
/// with a correlated random intercept and slope.
pub fn testbeds() -> Vec<Testbed> {
    let logit = FamilySpec::binomial(LinkKind::Logit).unwrap();
    let probit = FamilySpec::binomial(LinkKind::Probit).unwrap();
    let pois = FamilySpec::poisson();
    vec![
        Testbed { name: "logit-intercept", family: logit, slope: false },
        Testbed { name: "logit-slope", family: logit, slope: true },
        Testbed { name: "probit-intercept", family: probit, slope: false },
        Testbed { name: "probit-slope", family: probit, slope: true },
        Testbed { name: "poisson-intercept", family: pois, slope: false },
        Testbed { name: "poisson-slope", family: pois, slope: true },
    ]
}

fn draw(family: FamilySpec, eta: f64, rng: &mut ChaCha8Rng) -> f64 {
    let mu = family.inverse_link(eta).unwrap();
    match family.kind() {
        glmm_deriv::FamilyKind::Binomial => {
            if rng.random::<f64>() < mu {
                1.0
            } else {
                0.0
            }
        }
        glmm_deriv::FamilyKind::Poisson => Poisson::new(mu).unwrap().sample(rng),
    }
}

/// Two fixed effects (intercept, uniform covariate); random intercept with
/// sd 0.8 and, for slope models, a slope with sd 0.5 and correlation 0.3.
pub fn simulate(tb: &Testbed, clusters: usize, size: usize, seed: u64) -> Arc<GlmmData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = clusters * size;
    let x = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
    let beta = match tb.family.kind() {
        glmm_deriv::FamilyKind::Binomial => [0.3, 0.8],
        glmm_deriv::FamilyKind::Poisson => [0.6, 0.4],
    };
    let std = Normal::new(0.0, 1.0).unwrap();
    let mut y = Vec::with_capacity(n);
    for c in 0..clusters {
        let (e0, e1): (f64, f64) = (std.sample(&mut rng), std.sample(&mut rng));
        let b0 = 0.8 * e0;
        let b1 = if tb.slope { 0.5 * (0.3 * e0 + (1.0 - 0.09f64).sqrt() * e1) } else { 0.0 };
        for r in c * size..(c + 1) * size {
            let eta = beta[0] + b0 + (beta[1] + b1) * x[(r, 1)];
            y.push(draw(tb.family, eta, &mut rng));
        }
    }
    let z = if tb.slope { x.clone() } else { x.columns(0, 1).into_owned() };
    let g: Vec<String> = (0..n).map(|r| format!("c{}", r / size)).collect();
    let data = GlmmData::new(&y, &x, &z, &g).unwrap();
    let random = if tb.slope { vec!["(Intercept)".into(), "x".into()] } else { vec!["(Intercept)".into()] };
    Arc::new(data.with_names(vec!["(Intercept)".into(), "x".into()], random).unwrap())
}

/// Epilepsy-style Poisson data: 59 subjects, visits numbered 1 to 4,
/// standardized baseline and treatment covariates, correlated random
/// intercept and visit slope.
pub fn simulate_epilepsy(seed: u64) -> Arc<GlmmData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subjects = 59;
    let std = Normal::new(0.0, 1.0).unwrap();
    let (sd0, sd1, rho) = (0.55, 0.12, -0.3f64);
    let mut rows_x = Vec::new();
    let mut y = Vec::new();
    let mut g = Vec::new();
    for s in 0..subjects {
        let trt = if s % 2 == 0 { 0.0 } else { 1.0 };
        let zbase: f64 = std.sample(&mut rng);
        let (e0, e1): (f64, f64) = (std.sample(&mut rng), std.sample(&mut rng));
        let b0 = sd0 * e0;
        let b1 = sd1 * (rho * e0 + (1.0 - rho * rho).sqrt() * e1);
        for visit in 1..=4 {
            let v = visit as f64;
            let eta: f64 = 1.8 + 0.7 * zbase - 0.27 * trt - 0.06 * v + b0 + b1 * v;
            rows_x.extend_from_slice(&[1.0, zbase, trt, v]);
            y.push(Poisson::new(eta.exp()).unwrap().sample(&mut rng));
            g.push(format!("s{s}"));
        }
    }
    let n = y.len();
    let x = DMatrix::from_row_slice(n, 4, &rows_x);
    let z = DMatrix::from_fn(n, 2, |r, j| if j == 0 { 1.0 } else { x[(r, 3)] });
    let data = GlmmData::new(&y, &x, &z, &g).unwrap();
    Arc::new(
        data.with_names(
            vec!["(Intercept)".into(), "zBase".into(), "Trt".into(), "visit".into()],
            vec!["(Intercept)".into(), "visit".into()],
        )
        .unwrap(),
    )
}

/// Long-format item responses as a Rasch GLMM: one indicator column per item
/// (no intercept) and a person random intercept.
pub fn rasch_data(responses: &[Vec<f64>]) -> Arc<GlmmData> {
    let items = responses[0].len();
    let n = responses.len() * items;
    let mut y = Vec::with_capacity(n);
    let mut g = Vec::with_capacity(n);
    let mut x = DMatrix::zeros(n, items);
    for (p, row) in responses.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let r = p * items + j;
            y.push(*v);
            x[(r, j)] = 1.0;
            g.push(format!("p{p}"));
        }
    }
    let z = DMatrix::from_element(n, 1, 1.0);
    let data = GlmmData::new(&y, &x, &z, &g).unwrap();
    Arc::new(
        data.with_names((1..=items).map(|j| format!("item{j}")).collect(), vec!["(Intercept)".into()])
            .unwrap(),
    )
}

/// Rasch responses with item intercepts `easiness` and ability sd `sigma`.
pub fn simulate_rasch(persons: usize, easiness: &[f64], sigma: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = Normal::new(0.0, 1.0).unwrap();
    (0..persons)
        .map(|_| {
            let ability = sigma * std.sample(&mut rng);
            easiness
                .iter()
                .map(|e| {
                    let p = 1.0 / (1.0 + (-(e + ability)).exp());
                    if rng.random::<f64>() < p {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures").join(name)
}

/// The LSAT7 responses (1000 persons x 5 items) from the shipped fixture.
pub fn lsat7() -> Vec<Vec<f64>> {
    let text = std::fs::read_to_string(fixture("lsat7.csv")).unwrap();
    let mut persons: Vec<Vec<f64>> = Vec::new();
    let mut last = String::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f[0] != last {
            persons.push(Vec::new());
            last = f[0].to_string();
        }
        persons.last_mut().unwrap().push(f[2].parse().unwrap());
    }
    persons
}

/// Pearson correlation.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}
