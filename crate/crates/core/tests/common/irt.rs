//! Direct marginal Rasch likelihood: a fixed 61-point ability grid on
//! [-6, 6] with normal-density weights, differentiated by hand. Shares no
//! code with the GLMM path.

pub const GRID_POINTS: usize = 61;
pub const GRID_HALF_WIDTH: f64 = 6.0;

pub struct RaschOracle {
    /// `log l_i` per person.
    pub loglik: Vec<f64>,
    /// Per person: d/d easiness_j for each item, then d/d sigma^2.
    pub scores: Vec<Vec<f64>>,
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn rasch_oracle(responses: &[Vec<f64>], easiness: &[f64], sigma2: f64) -> RaschOracle {
    let h = 2.0 * GRID_HALF_WIDTH / (GRID_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..GRID_POINTS).map(|g| -GRID_HALF_WIDTH + g as f64 * h).collect();
    let log_prior: Vec<f64> = grid
        .iter()
        .map(|b| h.ln() - 0.5 * (2.0 * std::f64::consts::PI * sigma2).ln() - b * b / (2.0 * sigma2))
        .collect();
    let mut loglik = Vec::with_capacity(responses.len());
    let mut scores = Vec::with_capacity(responses.len());
    for y in responses {
        let logs: Vec<f64> = grid
            .iter()
            .zip(&log_prior)
            .map(|(b, lp)| {
                lp + y
                    .iter()
                    .zip(easiness)
                    .map(|(yj, e)| {
                        let p = logistic(e + b);
                        if *yj == 1.0 {
                            p.ln()
                        } else {
                            (1.0 - p).ln()
                        }
                    })
                    .sum::<f64>()
            })
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = w.iter().sum();
        loglik.push(max + total.ln());
        let mut s = vec![0.0; easiness.len() + 1];
        for (g, b) in grid.iter().enumerate() {
            let post = w[g] / total;
            for (j, e) in easiness.iter().enumerate() {
                s[j] += post * (y[j] - logistic(e + b));
            }
            s[easiness.len()] += post * (b * b / (2.0 * sigma2 * sigma2) - 0.5 / sigma2);
        }
        scores.push(s);
    }
    RaschOracle { loglik, scores }
}
