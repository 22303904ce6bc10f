//! Derivative-free minimization (Nelder–Mead with adaptive coefficients and
//! restarts from the incumbent).

#[derive(Debug, Clone)]
pub struct NelderMeadOptions {
    pub max_evals: usize,
    /// Spread of simplex function values at termination.
    pub f_tol: f64,
    /// Simplex diameter (infinity norm) at termination.
    pub x_tol: f64,
    pub initial_step: f64,
    pub max_restarts: usize,
    /// A restart that improves the objective by less than this ends the search.
    pub restart_tol: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_evals: 10_000,
            f_tol: 1e-11,
            x_tol: 1e-8,
            initial_step: 0.25,
            max_restarts: 8,
            restart_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    pub restarts: usize,
    /// False when the evaluation budget ran out.
    pub converged: bool,
}

struct Counter<F> {
    f: F,
    evals: usize,
}

impl<F: FnMut(&[f64]) -> f64> Counter<F> {
    fn call(&mut self, x: &[f64]) -> f64 {
        self.evals += 1;
        let v = (self.f)(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    }
}

/// Minimizes `f` starting at `x0`.
pub fn minimize<F>(f: F, x0: &[f64], opts: &NelderMeadOptions) -> Minimum
where
    F: FnMut(&[f64]) -> f64,
{
    let mut counter = Counter { f, evals: 0 };
    let mut best_x = x0.to_vec();
    let mut best_f = counter.call(x0);
    let mut step = opts.initial_step;
    let mut restarts = 0;
    loop {
        let (x, fx, ok) = run_simplex(&mut counter, &best_x, best_f, step, opts);
        let improvement = best_f - fx;
        if fx <= best_f {
            best_x = x;
            best_f = fx;
        }
        if !ok {
            return Minimum {
                x: best_x,
                value: best_f,
                evaluations: counter.evals,
                restarts,
                converged: false,
            };
        }
        if improvement.abs() < opts.restart_tol || restarts >= opts.max_restarts {
            return Minimum {
                x: best_x,
                value: best_f,
                evaluations: counter.evals,
                restarts,
                converged: true,
            };
        }
        restarts += 1;
        step = (step * 0.5).max(1e-3);
    }
}

fn run_simplex<F: FnMut(&[f64]) -> f64>(
    counter: &mut Counter<F>,
    x0: &[f64],
    f0: f64,
    step: f64,
    opts: &NelderMeadOptions,
) -> (Vec<f64>, f64, bool) {
    let n = x0.len();
    let nf = n as f64;
    let (alpha, gamma, rho, sigma) = if n > 2 {
        (1.0, 1.0 + 2.0 / nf, 0.75 - 0.5 / nf, 1.0 - 1.0 / nf)
    } else {
        (1.0, 2.0, 0.5, 0.5)
    };

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), f0));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += step * x[i].abs().max(1.0);
        let fx = counter.call(&x);
        simplex.push((x, fx));
    }

    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let f_best = simplex[0].1;
        let f_worst = simplex[n].1;
        let spread = (f_worst - f_best).abs();
        let diameter = simplex[1..]
            .iter()
            .flat_map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if spread <= opts.f_tol * (1.0 + f_best.abs()) && diameter <= opts.x_tol {
            return (simplex[0].0.clone(), f_best, true);
        }
        if counter.evals >= opts.max_evals {
            return (simplex[0].0.clone(), f_best, false);
        }

        let mut centroid = vec![0.0; n];
        for (x, _) in &simplex[..n] {
            for (c, v) in centroid.iter_mut().zip(x) {
                *c += v / nf;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[n].0)
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };

        let xr = along(alpha);
        let fr = counter.call(&xr);
        if fr < simplex[0].1 {
            let xe = along(alpha * gamma);
            let fe = counter.call(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < simplex[n].1 {
            let xc = along(alpha * rho);
            let fc = counter.call(&xc);
            (xc, fc)
        } else {
            let xc = along(-rho);
            let fc = counter.call(&xc);
            (xc, fc)
        };
        if fc < simplex[n].1.min(fr) {
            simplex[n] = (xc, fc);
            continue;
        }
        // shrink toward the best vertex
        let best = simplex[0].0.clone();
        for vertex in simplex.iter_mut().skip(1) {
            let x: Vec<f64> = best.iter().zip(&vertex.0).map(|(b, v)| b + sigma * (v - b)).collect();
            let fx = counter.call(&x);
            *vertex = (x, fx);
        }
    }
}
