//! Tail probabilities of weighted sums of independent chi-square(1) variables.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::par;

/// Gauss–Legendre nodes and weights on [-1, 1].
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// `P(sum_j weights[j] * chi2_1 > x)` by numerical inversion of the
/// characteristic function (Imhof). Weights may have mixed signs; zero
/// weights are ignored.
pub fn weighted_chisq_sf(x: f64, weights: &[f64]) -> f64 {
    let w: Vec<f64> = weights.iter().copied().filter(|v| *v != 0.0).collect();
    if w.is_empty() {
        return if x < 0.0 { 1.0 } else { 0.0 };
    }
    if w.iter().all(|v| *v > 0.0) && x <= 0.0 {
        return 1.0;
    }
    if w.iter().all(|v| *v < 0.0) && x >= 0.0 {
        return 0.0;
    }
    let m = w.len() as f64;
    let lmax = w.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let log_sqrt_prod: f64 = w.iter().map(|v| 0.5 * v.abs().ln()).sum();
    let integrand = |u: f64| -> f64 {
        if u == 0.0 {
            // limit of sin(theta)/(u rho) as u -> 0
            return 0.5 * (w.iter().sum::<f64>() - x);
        }
        let theta = 0.5 * w.iter().map(|l| (l * u).atan()).sum::<f64>() - 0.5 * x * u;
        let log_rho = 0.25 * w.iter().map(|l| (l * u).powi(2).ln_1p()).sum::<f64>();
        theta.sin() / (u * log_rho.exp())
    };
    // |integrand| <= u^{-1-m/2} / prod sqrt|l|
    let amplitude = |u: f64| (-(1.0 + 0.5 * m) * u.ln() - log_sqrt_prod).exp();

    let (gx, gw) = gauss_legendre(24);
    let panel = |a: f64, b: f64| -> f64 {
        let (c, h) = (0.5 * (a + b), 0.5 * (b - a));
        gx.iter().zip(&gw).map(|(t, wt)| wt * integrand(c + h * t)).sum::<f64>() * h
    };

    // inner region where the atan terms still bend
    let lmin = w.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    let inner = (50.0 / lmin).min(1e6 / lmax);
    let fine = 1.0 / lmax;
    let mut total = 0.0;
    let mut u = 0.0;
    let half_period = if x.abs() > 0.0 { 2.0 * std::f64::consts::PI / x.abs() } else { f64::INFINITY };
    let step_inner = fine.min(half_period / 4.0);
    while u < inner {
        let b = (u + step_inner * (1.0 + u / fine).sqrt()).min(inner);
        total += panel(u, b);
        u = b;
    }

    if x == 0.0 || half_period > 1e12 {
        // non-oscillatory tail: geometric panels, then the power-law remainder
        loop {
            let b = 2.0 * u;
            total += panel(u, b);
            u = b;
            if amplitude(u) * u < 1e-12 || u > 1e300 {
                break;
            }
        }
        let theta_inf = 0.25 * std::f64::consts::PI * w.iter().map(|v| v.signum()).sum::<f64>();
        total += theta_inf.sin() * (2.0 / m) * amplitude(u) * u;
    } else {
        // oscillatory tail: align panels with half-periods of the linear phase
        // and finish with repeated averaging of the alternating partial sums
        let mut sums = Vec::new();
        let mut k = (u / half_period).ceil();
        let mut edge = k * half_period;
        if edge > u {
            total += panel(u, edge);
        }
        loop {
            k += 1.0;
            let next = k * half_period;
            total += panel(edge, next);
            edge = next;
            sums.push(total);
            if (amplitude(edge) * half_period < 1e-8 && sums.len() >= 24) || sums.len() > 2_000_000 {
                break;
            }
        }
        let mut tail: Vec<f64> = sums[sums.len() - 16..].to_vec();
        while tail.len() > 1 {
            tail = tail.windows(2).map(|p| 0.5 * (p[0] + p[1])).collect();
        }
        total = tail[0];
    }
    (0.5 + total / std::f64::consts::PI).clamp(0.0, 1.0)
}

/// Monte Carlo counterpart of [`weighted_chisq_sf`].
pub fn weighted_chisq_sf_mc(x: f64, weights: &[f64], draws: usize, seed: u64) -> f64 {
    const BLOCK: usize = 10_000;
    let blocks = draws.div_ceil(BLOCK);
    let counts = par::map_indexed(blocks, |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(b as u64);
        let n = BLOCK.min(draws - b * BLOCK);
        (0..n)
            .filter(|_| {
                let q: f64 = weights
                    .iter()
                    .map(|l| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        l * z * z
                    })
                    .sum();
                q > x
            })
            .count()
    });
    counts.iter().sum::<usize>() as f64 / draws as f64
}
