//! Optimal transport between discrete measures on the torus.
//!
//! Two ground metrics are supported: the geodesic torus distance and its
//! logarithmic rescaling d_α(x,y) = log(1 + |x−y| / h^α), a bounded concave
//! increase of the geodesic distance (hence itself a metric) whose scale h
//! tracks the discretization. Costs are linear in the plan, so the exact
//! solver is a network simplex on the complete bipartite graph; it returns
//! the optimal plan together with dual potentials, enabling
//! Kantorovich–Rubinstein duality-gap audits. A log-domain Sinkhorn solver
//! covers instances beyond the exact solver's capacity.

mod entropic;
mod exact;

pub use entropic::{
    wasserstein_entropic, EntropicResult, EPSILON_FLOOR_FACTOR, MARGINAL_TOLERANCE,
};
pub use exact::{wasserstein_exact, PlanArc, TransportPlan};

use crate::error::{Error, Result};
use crate::torus::{periodic_distance_slice, wrap_unit};
use serde::{Deserialize, Serialize};
use std::io;

/// Atoms below this weight are dropped at construction.
pub const WEIGHT_FLOOR: f64 = 1e-14;
/// Per-side atom budget of the exact solver.
pub const EXACT_ATOM_CAP: usize = 5000;
/// Relative mass mismatch tolerated (and silently reconciled) by solvers.
const MASS_TOLERANCE: f64 = 1e-8;

/// A nonnegative discrete measure Σ w_i δ_{x_i} on 𝕋^d.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscreteMeasure {
    dim: usize,
    /// Flat wrapped coordinates, n × d.
    positions: Vec<f64>,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    /// Builds a measure from flat positions (wrapped in) and weights.
    /// Weights must be finite and ≥ 0; atoms lighter than `WEIGHT_FLOOR`
    /// are dropped.
    pub fn new(dim: usize, positions: &[f64], weights: &[f64]) -> Result<Self> {
        if dim == 0 || dim > crate::qmc::MAX_DIM {
            return Err(Error::invalid(format!("measure dimension {dim} out of range")));
        }
        if positions.len() != weights.len() * dim {
            return Err(Error::invalid(format!(
                "{} coordinates do not hold {} atoms of dimension {dim}",
                positions.len(),
                weights.len()
            )));
        }
        if positions.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("atom positions must be finite"));
        }
        let mut pos = Vec::with_capacity(positions.len());
        let mut w = Vec::with_capacity(weights.len());
        for (i, &wi) in weights.iter().enumerate() {
            if !wi.is_finite() || wi < 0.0 {
                return Err(Error::invalid(format!(
                    "weight {wi} at atom {i} is negative or non-finite"
                )));
            }
            if wi < WEIGHT_FLOOR {
                continue;
            }
            w.push(wi);
            pos.extend(positions[i * dim..(i + 1) * dim].iter().map(|&c| wrap_unit(c)));
        }
        if w.is_empty() {
            return Err(Error::invalid("measure has no atoms above the weight floor"));
        }
        Ok(DiscreteMeasure {
            dim,
            positions: pos,
            weights: w,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn position(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// The same measure scaled to unit mass.
    pub fn normalized(&self) -> DiscreteMeasure {
        let mass = self.total_mass();
        let mut out = self.clone();
        out.weights.iter_mut().for_each(|w| *w /= mass);
        out
    }

    /// Image measure under a map of atom positions; weights are untouched.
    pub fn pushforward(&self, map: impl Fn(&[f64]) -> Vec<f64>) -> Result<DiscreteMeasure> {
        let mut pos = Vec::with_capacity(self.positions.len());
        for i in 0..self.len() {
            let y = map(self.position(i));
            if y.len() != self.dim {
                return Err(Error::invalid("pushforward map changed the dimension"));
            }
            if y.iter().any(|c| !c.is_finite()) {
                return Err(Error::invalid("pushforward produced non-finite position"));
            }
            pos.extend(y.into_iter().map(wrap_unit));
        }
        Ok(DiscreteMeasure {
            dim: self.dim,
            positions: pos,
            weights: self.weights.clone(),
        })
    }

    /// Writes atoms as CSV: weight, x1..xd.
    pub fn write_csv<W: io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["weight".to_string()];
        header.extend((1..=self.dim).map(|k| format!("x{k}")));
        w.write_record(&header).map_err(crate::flow::csv_error)?;
        for i in 0..self.len() {
            let mut rec = vec![format!("{}", self.weights[i])];
            rec.extend(self.position(i).iter().map(|c| format!("{c}")));
            w.write_record(&rec).map_err(crate::flow::csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a measure back from `write_csv` output.
    pub fn read_csv<R: io::Read>(reader: R) -> Result<DiscreteMeasure> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers().map_err(crate::flow::csv_error)?.clone();
        if headers.is_empty() || &headers[0] != "weight" {
            return Err(Error::Format("measure csv must start with 'weight'".into()));
        }
        let dim = headers.len() - 1;
        let mut weights = Vec::new();
        let mut positions = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(crate::flow::csv_error)?;
            if rec.len() != dim + 1 {
                return Err(Error::Format("measure csv row width mismatch".into()));
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad number {s:?} in measure csv")))
            };
            weights.push(parse(&rec[0])?);
            for k in 1..=dim {
                positions.push(parse(&rec[k])?);
            }
        }
        DiscreteMeasure::new(dim, &positions, &weights)
    }
}

/// Ground cost between atom positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GroundMetric {
    /// Geodesic distance on the unit torus.
    EuclideanTorus,
    /// d_α(x, y) = log(1 + |x−y| / h^α) with α ∈ [0, 1], h > 0.
    Logarithmic { alpha: f64, h: f64 },
}

impl GroundMetric {
    pub fn logarithmic(alpha: f64, h: f64) -> Result<GroundMetric> {
        let m = GroundMetric::Logarithmic { alpha, h };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if let GroundMetric::Logarithmic { alpha, h } = self {
            if !(0.0..=1.0).contains(alpha) {
                return Err(Error::invalid(format!(
                    "logarithmic metric exponent α = {alpha} outside [0, 1]"
                )));
            }
            if !(*h > 0.0 && h.is_finite()) {
                return Err(Error::invalid(format!(
                    "logarithmic metric scale h = {h} must be positive"
                )));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn distance(&self, x: &[f64], y: &[f64]) -> f64 {
        let r = periodic_distance_slice(x, y);
        match self {
            GroundMetric::EuclideanTorus => r,
            GroundMetric::Logarithmic { alpha, h } => (r / h.powf(*alpha)).ln_1p(),
        }
    }

    /// Largest possible distance between points of 𝕋^d.
    pub fn diameter(&self, dim: usize) -> f64 {
        let r = (dim as f64).sqrt() / 2.0;
        match self {
            GroundMetric::EuclideanTorus => r,
            GroundMetric::Logarithmic { alpha, h } => (r / h.powf(*alpha)).ln_1p(),
        }
    }
}

/// Validates a transport instance and returns ν's weights rescaled to μ's
/// total mass (the relative mismatch must be ≤ 1e-9) plus the cost matrix.
pub(crate) fn prepare_instance(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    metric: &GroundMetric,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    metric.validate()?;
    if mu.dim() != nu.dim() {
        return Err(Error::invalid("measures live in different dimensions"));
    }
    let ma = mu.total_mass();
    let mb = nu.total_mass();
    if !(ma > 0.0 && mb > 0.0) {
        return Err(Error::invalid("measures must carry positive mass"));
    }
    if ((ma - mb) / ma.max(mb)).abs() > MASS_TOLERANCE {
        return Err(Error::invalid(format!(
            "total masses differ beyond tolerance: {ma} vs {mb}"
        )));
    }
    let a = mu.weights().to_vec();
    let scale = ma / mb;
    let b: Vec<f64> = nu.weights().iter().map(|w| w * scale).collect();
    let (m, n) = (mu.len(), nu.len());
    let mut cost = vec![0.0f64; m * n];
    for i in 0..m {
        let xi = mu.position(i);
        for j in 0..n {
            cost[i * n + j] = metric.distance(xi, nu.position(j));
        }
    }
    Ok((a, b, cost))
}

/// The splitting bound Σ_i M_i W(μ̄_i, ν̄_i) ≥ W(Σ μ_i, Σ ν_i): parts must
/// be pairwise mass-matched; transporting each part internally is one
/// admissible plan for the sums, which is what makes this an upper bound.
pub fn splitting_upper_bound(
    parts_mu: &[DiscreteMeasure],
    parts_nu: &[DiscreteMeasure],
    metric: &GroundMetric,
) -> Result<f64> {
    if parts_mu.len() != parts_nu.len() {
        return Err(Error::invalid(format!(
            "{} μ-parts vs {} ν-parts",
            parts_mu.len(),
            parts_nu.len()
        )));
    }
    if parts_mu.is_empty() {
        return Err(Error::invalid("splitting bound needs at least one part"));
    }
    let mut total = 0.0;
    for (k, (pm, pn)) in parts_mu.iter().zip(parts_nu).enumerate() {
        let (ma, mb) = (pm.total_mass(), pn.total_mass());
        if ((ma - mb) / ma.max(mb)).abs() > MASS_TOLERANCE {
            return Err(Error::invalid(format!(
                "part {k}: masses {ma} and {mb} are not matched"
            )));
        }
        total += ma * wasserstein_exact(&pm.normalized(), &pn.normalized(), metric)?.cost;
    }
    Ok(total)
}

/// Duality gap W(μ, ν) − [∫f dν − ∫f dμ] for a candidate Kantorovich
/// potential `f` given by its values on the union support (μ atoms first,
/// then ν atoms). The candidate must be 1-Lipschitz for the ground metric
/// (checked pairwise); any such candidate keeps the gap ≥ −10⁻⁹, and the
/// potential extracted by [`optimal_kr_potential`] drives it below 10⁻⁷.
pub fn kr_dual_gap(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    metric: &GroundMetric,
    candidate: &[f64],
) -> Result<f64> {
    let (m, n) = (mu.len(), nu.len());
    if candidate.len() != m + n {
        return Err(Error::invalid(format!(
            "candidate has {} values for {m} + {n} support atoms",
            candidate.len()
        )));
    }
    if candidate.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("candidate potential must be finite"));
    }
    metric.validate()?;
    let position = |k: usize| {
        if k < m {
            mu.position(k)
        } else {
            nu.position(k - m)
        }
    };
    for p in 0..m + n {
        for q in p + 1..m + n {
            let slack = metric.distance(position(p), position(q))
                - (candidate[p] - candidate[q]).abs();
            if slack < -1e-9 {
                return Err(Error::invalid(format!(
                    "candidate violates the 1-Lipschitz bound between support \
                     atoms {p} and {q} by {:.3e}",
                    -slack
                )));
            }
        }
    }
    let plan = wasserstein_exact(mu, nu, metric)?;
    let against_mu: f64 = mu
        .weights()
        .iter()
        .zip(&candidate[..m])
        .map(|(w, f)| w * f)
        .sum();
    let against_nu: f64 = nu
        .weights()
        .iter()
        .zip(&candidate[m..])
        .map(|(w, f)| w * f)
        .sum();
    Ok(plan.cost - (against_nu - against_mu))
}

/// Builds the tight Kantorovich candidate from an optimal plan's node
/// potentials: f(z) = min_i [c(z, x_i) − φ_i] is 1-Lipschitz as an infimum
/// of metric translates and reproduces the optimal dual value, so
/// [`kr_dual_gap`] evaluates to ~0 on it.
pub fn optimal_kr_potential(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    metric: &GroundMetric,
    plan: &TransportPlan,
) -> Result<Vec<f64>> {
    if plan.potential_mu.len() != mu.len() || plan.potential_nu.len() != nu.len() {
        return Err(Error::invalid("plan potentials do not match the measures"));
    }
    metric.validate()?;
    let eval = |z: &[f64]| -> f64 {
        (0..mu.len())
            .map(|i| metric.distance(z, mu.position(i)) - plan.potential_mu[i])
            .fold(f64::INFINITY, f64::min)
    };
    let mut f = Vec::with_capacity(mu.len() + nu.len());
    for i in 0..mu.len() {
        f.push(eval(mu.position(i)));
    }
    for j in 0..nu.len() {
        f.push(eval(nu.position(j)));
    }
    Ok(f)
}

/// Writes plan arcs as CSV: i, j, mass, ground_cost.
pub fn write_plan_csv<W: io::Write>(
    plan: &TransportPlan,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    metric: &GroundMetric,
    writer: W,
) -> Result<()> {
    metric.validate()?;
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["i", "j", "mass", "ground_cost"])
        .map_err(crate::flow::csv_error)?;
    for arc in &plan.arcs {
        if arc.from >= mu.len() || arc.to >= nu.len() {
            return Err(Error::invalid("plan arc indexes outside the measures"));
        }
        let c = metric.distance(mu.position(arc.from), nu.position(arc.to));
        w.write_record([
            arc.from.to_string(),
            arc.to.to_string(),
            format!("{}", arc.mass),
            format!("{c}"),
        ])
        .map_err(crate::flow::csv_error)?;
    }
    w.flush()?;
    Ok(())
}
