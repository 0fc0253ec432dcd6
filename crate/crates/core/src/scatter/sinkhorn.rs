//! Entropic optimal transport with log-domain Sinkhorn scaling.

use super::{cost_matrix, ScatterSet, TransportPlan};
use crate::error::{Error, Result};

pub const SINKHORN_MAX_ITERS: usize = 1000;
/// L1 row-marginal violation at which iteration stops.
pub const SINKHORN_TOL: f64 = 1e-9;
/// ε as a fraction of the mean ground cost.
pub const EPSILON_FRACTION: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct SinkhornOutput {
    /// Unregularized cost `Σ f·c / Σ f` of the regularized plan.
    pub distance: f64,
    pub plan: TransportPlan,
    pub converged: bool,
    pub iterations: usize,
    pub marginal_error: f64,
}

/// `0.05 × mean pairwise cost`; zero when all points coincide.
pub fn default_epsilon(p: &ScatterSet, q: &ScatterSet) -> f64 {
    let c = cost_matrix(p, q);
    EPSILON_FRACTION * c.iter().sum::<f64>() / c.len() as f64
}

fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn emd_sinkhorn(
    p: &ScatterSet,
    q: &ScatterSet,
    epsilon: f64,
    max_iters: usize,
    tol: f64,
) -> Result<SinkhornOutput> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::invalid(format!(
            "epsilon must be > 0, got {epsilon}"
        )));
    }
    let (n, m) = (p.len(), q.len());
    if n == 0 || m == 0 {
        return Err(Error::Empty("scatter set"));
    }
    let cost = cost_matrix(p, q);
    let log_a: Vec<f64> = p.weights.iter().map(|w| w.ln()).collect();
    let log_b: Vec<f64> = q.weights.iter().map(|w| w.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];

    let plan_of = |f: &[f64], g: &[f64]| -> Vec<f64> {
        let mut k = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                k[i * m + j] = ((f[i] + g[j] - cost[i * m + j]) / epsilon).exp();
            }
        }
        k
    };

    let mut converged = false;
    let mut iterations = 0;
    let mut err = f64::INFINITY;
    for it in 0..max_iters {
        iterations = it + 1;
        for i in 0..n {
            let row = &cost[i * m..(i + 1) * m];
            let lse = logsumexp((0..m).map(|j| (g[j] - row[j]) / epsilon));
            f[i] = epsilon * (log_a[i] - lse);
        }
        for j in 0..m {
            let lse = logsumexp((0..n).map(|i| (f[i] - cost[i * m + j]) / epsilon));
            g[j] = epsilon * (log_b[j] - lse);
        }
        // columns are exact after the g-update; check rows
        err = 0.0;
        for i in 0..n {
            let row = &cost[i * m..(i + 1) * m];
            let s: f64 = (0..m)
                .map(|j| ((f[i] + g[j] - row[j]) / epsilon).exp())
                .sum();
            err += (s - p.weights[i]).abs();
        }
        if err <= tol {
            converged = true;
            break;
        }
    }
    let plan = TransportPlan {
        rows: n,
        cols: m,
        flows: plan_of(&f, &g),
    };
    let distance = plan.normalized_cost(&cost);
    Ok(SinkhornOutput {
        distance,
        plan,
        converged,
        iterations,
        marginal_error: err,
    })
}
