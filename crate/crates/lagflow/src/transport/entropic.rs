//! Entropically regularized transport via log-domain Sinkhorn iteration.
//!
//! All scaling updates run on log potentials with stabilized log-sum-exp,
//! so small regularization strengths neither overflow nor underflow. The
//! reported cost is the transport cost of the entropic plan itself (no
//! entropy term), which upper-bounds the exact cost up to the marginal
//! violation and approaches it from above as ε decreases.

use super::{prepare_instance, DiscreteMeasure, GroundMetric};
use crate::error::{Error, Result};

/// Regularization must stay above `EPSILON_FLOOR_FACTOR · diameter`; far
/// below that the kernel is numerically a permutation and iteration stalls.
pub const EPSILON_FLOOR_FACTOR: f64 = 1e-3;
/// Mass-relative sup-norm marginal violation accepted as converged.
pub const MARGINAL_TOLERANCE: f64 = 1e-6;
/// Cost-matrix entries the solver is willing to hold in memory.
const MAX_MATRIX_ENTRIES: usize = 16_777_216;

/// Converged entropic plan summary.
#[derive(Debug, Clone)]
pub struct EntropicResult {
    /// Transport cost Σ π_ij c_ij of the entropic plan.
    pub cost: f64,
    pub iterations: usize,
    /// Mass-relative sup-norm mismatch of the slack marginal.
    pub marginal_violation: f64,
    pub epsilon: f64,
}

/// Runs Sinkhorn iteration at regularization `epsilon` until the marginal
/// violation drops below `MARGINAL_TOLERANCE` or `max_iter` is exhausted;
/// the latter returns `Error::NotConverged` carrying the partial cost.
pub fn wasserstein_entropic(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    metric: &GroundMetric,
    epsilon: f64,
    max_iter: usize,
) -> Result<EntropicResult> {
    metric.validate()?;
    let floor = EPSILON_FLOOR_FACTOR * metric.diameter(mu.dim());
    if !(epsilon.is_finite() && epsilon >= floor) {
        return Err(Error::invalid(format!(
            "regularization ε = {epsilon} below the stability floor {floor:.3e} \
             (10⁻³ × ground-metric diameter)"
        )));
    }
    if max_iter == 0 {
        return Err(Error::invalid("max_iter must be at least 1"));
    }
    if mu.len().saturating_mul(nu.len()) > MAX_MATRIX_ENTRIES {
        return Err(Error::Capacity(format!(
            "cost matrix {} × {} exceeds {MAX_MATRIX_ENTRIES} entries",
            mu.len(),
            nu.len()
        )));
    }
    let (a, b, cost) = prepare_instance(mu, nu, metric)?;
    let (m, n) = (a.len(), b.len());
    let total_mass: f64 = a.iter().sum();
    let inv_eps = 1.0 / epsilon;

    let log_a: Vec<f64> = a.iter().map(|x| x.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|x| x.ln()).collect();
    let mut f = vec![0.0f64; m];
    let mut g = vec![0.0f64; n];
    // Scratch for one row/column of scaled kernel exponents.
    let mut row_exp = vec![0.0f64; n];

    let mut iterations = 0usize;
    let mut violation = f64::INFINITY;
    while iterations < max_iter {
        iterations += 1;
        // Row scaling: make every row marginal exact given g.
        for i in 0..m {
            let row = &cost[i * n..(i + 1) * n];
            for j in 0..n {
                row_exp[j] = (g[j] - row[j]) * inv_eps;
            }
            f[i] = epsilon * (log_a[i] - log_sum_exp(&row_exp));
        }
        // Column scaling: make every column marginal exact given f.
        for j in 0..n {
            let mut mx = f64::NEG_INFINITY;
            for i in 0..m {
                mx = mx.max((f[i] - cost[i * n + j]) * inv_eps);
            }
            let mut s = 0.0;
            for i in 0..m {
                s += ((f[i] - cost[i * n + j]) * inv_eps - mx).exp();
            }
            g[j] = epsilon * (log_b[j] - mx - s.ln());
        }
        // After the column pass the column marginals are exact; the rows
        // carry the remaining mismatch.
        violation = 0.0;
        for i in 0..m {
            let row = &cost[i * n..(i + 1) * n];
            let mut sum = 0.0;
            for j in 0..n {
                sum += ((f[i] + g[j] - row[j]) * inv_eps).exp();
            }
            violation = violation.max((sum - a[i]).abs());
        }
        violation /= total_mass;
        if violation <= MARGINAL_TOLERANCE {
            break;
        }
    }

    let mut plan_cost = 0.0;
    for i in 0..m {
        let row = &cost[i * n..(i + 1) * n];
        for j in 0..n {
            plan_cost += ((f[i] + g[j] - row[j]) * inv_eps).exp() * row[j];
        }
    }

    if violation > MARGINAL_TOLERANCE {
        return Err(Error::NotConverged {
            iterations,
            violation,
            partial_cost: plan_cost,
        });
    }
    Ok(EntropicResult {
        cost: plan_cost,
        iterations,
        marginal_violation: violation,
        epsilon,
    })
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    let s: f64 = xs.iter().map(|x| (x - mx).exp()).sum();
    mx + s.ln()
}
