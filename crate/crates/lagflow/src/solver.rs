//! The two particle schemes for the continuity equation ∂_t ρ + div(ρu) = 0
//! and the harness that measures them.
//!
//! Both schemes start from the same per-cell masses M_i = ∫_{Q_i} ρ₀ dx. The
//! singular scheme places one Dirac atom of mass M_i at a random
//! representative of Q_i and advects the atoms through the explicit Euler
//! flow; realizations differ only through the seeded representative draw.
//! The diffuse scheme translates each cell's density patch rigidly along the
//! mean (cell-averaged) Euler flow and exposes the result as a quadrature
//! cloud, so one transport code path measures both schemes against a
//! reference push-forward cloud. The Monte Carlo driver runs independent
//! replications of the singular scheme, reports error statistics per sample
//! time, and optionally measures the merged mean of the replications.

use crate::error::{Error, Result};
use crate::fields::VelocityField;
use crate::flow::{
    euler_flow_diagnostic, mean_euler_flow, reference_flow, FlowConfig, FlowTrajectory,
};
use crate::mesh::{Density, Mesh, SampleMode};
use crate::qmc::{halton_point, halton_points, MAX_DIM};
use crate::torus::{periodic_distance_slice, wrap_unit};
use crate::transport::{
    wasserstein_entropic, wasserstein_exact, DiscreteMeasure, GroundMetric, EPSILON_FLOOR_FACTOR,
    EXACT_ATOM_CAP,
};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io;
use std::path::Path;

/// Step width of the finite-difference determinant probes along the flow.
const DET_PROBE_FD_STEP: f64 = 1e-5;
/// Iteration budget when atom counts force the entropic fallback.
const ENTROPIC_FALLBACK_MAX_ITER: usize = 20_000;
/// Nodes of the global quadrature normalizing the truncated singular density.
const DENSITY_NORM_NODES: usize = 1 << 17;
/// Relative mass mismatch accepted between a run and its reference before
/// rescaling; larger gaps indicate a real input mismatch, not quadrature
/// noise, and are rejected.
const REFERENCE_MASS_TOLERANCE: f64 = 1e-3;

/// ρ(x) = 1 + a·Π_k sin(2πx_k) with a ∈ [0, 1): strictly positive, smooth,
/// and of unit total mass (the product integrates to zero over the torus).
#[derive(Debug, Clone, Copy)]
pub struct SinusoidalDensity {
    amplitude: f64,
}

impl SinusoidalDensity {
    pub fn new(amplitude: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&amplitude) {
            return Err(Error::invalid(format!(
                "sinusoidal amplitude {amplitude} must lie in [0, 1) to keep the density positive"
            )));
        }
        Ok(SinusoidalDensity { amplitude })
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }
}

impl Density for SinusoidalDensity {
    fn eval(&self, x: &[f64]) -> f64 {
        let mut prod = 1.0;
        for &c in x {
            prod *= (std::f64::consts::TAU * c).sin();
        }
        1.0 + self.amplitude * prod
    }

    fn sup_bound(&self) -> f64 {
        1.0 + self.amplitude
    }
}

/// The density d(x, c)^{−γ} truncated at level K and normalized to unit
/// mass: ρ_K(x) = min(d(x,c)^{−γ}, K) / Z_K. The truncation level is always
/// caller-supplied; the estimates downstream depend on K and only the
/// experimenter can choose it. Requires 0 < γ < d so the untruncated
/// density is integrable, and the normalization Z_K is computed once at
/// construction by a fixed global low-discrepancy quadrature.
#[derive(Debug, Clone)]
pub struct TruncatedSingularDensity {
    dim: usize,
    center: Vec<f64>,
    gamma: f64,
    level: f64,
    norm: f64,
}

impl TruncatedSingularDensity {
    pub fn new(dim: usize, center: &[f64], gamma: f64, level: f64) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(Error::invalid(format!("density dimension {dim} not in 1..=3")));
        }
        if center.len() != dim {
            return Err(Error::invalid("density center has wrong dimension"));
        }
        if center.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("density center must be finite"));
        }
        if !(gamma > 0.0 && gamma < dim as f64) {
            return Err(Error::invalid(format!(
                "singularity exponent {gamma} must lie in (0, {dim}) for an integrable density"
            )));
        }
        if !(level > 0.0 && level.is_finite()) {
            return Err(Error::invalid("truncation level must be positive and finite"));
        }
        let center: Vec<f64> = center.iter().map(|&c| wrap_unit(c)).collect();
        let nodes = halton_points(DENSITY_NORM_NODES, dim);
        let mut z = 0.0;
        for x in nodes.chunks_exact(dim) {
            z += raw_truncated(x, &center, gamma, level);
        }
        z /= DENSITY_NORM_NODES as f64;
        Ok(TruncatedSingularDensity {
            dim,
            center,
            gamma,
            level,
            norm: z,
        })
    }

    pub fn level(&self) -> f64 {
        self.level
    }
}

fn raw_truncated(x: &[f64], center: &[f64], gamma: f64, level: f64) -> f64 {
    // d = 0 gives +∞, which min() truncates to the level.
    periodic_distance_slice(x, center).powf(-gamma).min(level)
}

impl Density for TruncatedSingularDensity {
    fn eval(&self, x: &[f64]) -> f64 {
        raw_truncated(&x[..self.dim], &self.center, self.gamma, self.level) / self.norm
    }

    fn sup_bound(&self) -> f64 {
        self.level / self.norm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    Singular,
    Diffuse,
}

/// How the singular scheme draws a cell's representative point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepresentativeMode {
    /// Uniform on the cell.
    Uniform,
    /// Proportional to ρ₀ restricted to the cell.
    Density,
}

/// Flow diagnostics retained with a run.
#[derive(Debug, Clone, Serialize)]
pub struct RunDiagnostics {
    /// Minimum one-step-map determinant per step over the probed atoms.
    pub step_min_dets: Vec<f64>,
    pub min_step_det: Option<f64>,
    /// Final-time ratios d(Φ(x), Φ(y)) / d(x, y) over probed atom pairs.
    pub bilipschitz_ratios: Vec<f64>,
}

impl RunDiagnostics {
    fn empty() -> Self {
        RunDiagnostics {
            step_min_dets: Vec::new(),
            min_step_det: None,
            bilipschitz_ratios: Vec::new(),
        }
    }
}

/// One realization of a scheme: the discrete measures it produced at the
/// requested sample times, plus enough metadata to identify the run.
/// Snapshot weights are built once and reused at every sample time, so the
/// total mass is bitwise constant along the run.
#[derive(Debug, Clone, Serialize)]
pub struct SchemeRun {
    pub scheme: SchemeKind,
    pub dt: f64,
    pub n_cells: usize,
    /// The replication seed; `None` for the deterministic diffuse scheme.
    pub seed: Option<u64>,
    pub sample_times: Vec<f64>,
    pub snapshots: Vec<DiscreteMeasure>,
    pub diagnostics: RunDiagnostics,
}

impl SchemeRun {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Persists the run: `run.json` with the full record and one
    /// `snapshot_NNN.csv` per sample time.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("run.json"), self.to_json()?)?;
        for (i, snap) in self.snapshots.iter().enumerate() {
            let file = std::fs::File::create(dir.join(format!("snapshot_{i:03}.csv")))?;
            snap.write_csv(io::BufWriter::new(file))?;
        }
        Ok(())
    }
}

fn check_mesh_dim(mesh: &Mesh, field: &VelocityField) -> Result<()> {
    if mesh.dim != field.dim() {
        return Err(Error::invalid(format!(
            "mesh dimension {} does not match field dimension {}",
            mesh.dim,
            field.dim()
        )));
    }
    Ok(())
}

fn check_sample_times(sample_times: &[f64], horizon: f64) -> Result<()> {
    if sample_times.is_empty() {
        return Err(Error::invalid("need at least one sample time"));
    }
    for &t in sample_times {
        if !t.is_finite() || t < -1e-12 || t > horizon + 1e-12 {
            return Err(Error::invalid(format!(
                "sample time {t} outside the run horizon [0, {horizon}]"
            )));
        }
    }
    Ok(())
}

/// Contraction/expansion ratios over consecutive atom pairs of an already
/// computed trajectory — free diagnostics, no extra flow solve. Pairs closer
/// than 10⁻⁹ initially are skipped.
fn trajectory_pair_ratios(traj: &FlowTrajectory, n_probes: usize) -> Vec<f64> {
    let d = traj.dim();
    let start = traj.wrapped_frame(0);
    let fin = traj.final_wrapped();
    let n_pairs = (traj.n_particles() / 2).min(n_probes);
    let mut out = Vec::with_capacity(n_pairs);
    for r in 0..n_pairs {
        let (i, j) = (2 * r, 2 * r + 1);
        let d0 = periodic_distance_slice(&start[i * d..(i + 1) * d], &start[j * d..(j + 1) * d]);
        if d0 < 1e-9 {
            continue;
        }
        let d1 = periodic_distance_slice(&fin[i * d..(i + 1) * d], &fin[j * d..(j + 1) * d]);
        out.push(d1 / d0);
    }
    out
}

/// Runs the singular probabilistic scheme: one atom of mass M_i at a seeded
/// random representative of each cell, advected by the explicit Euler flow.
/// Cells of zero mass carry no atom. `n_det_probes` atoms are probed for
/// one-step determinants each step (and half as many pairs for bi-Lipschitz
/// ratios); zero disables the diagnostics.
#[allow(clippy::too_many_arguments)]
pub fn run_singular(
    field: &VelocityField,
    mesh: &Mesh,
    rho0: &dyn Density,
    cfg: &FlowConfig,
    seed: u64,
    sample_times: &[f64],
    rep_mode: RepresentativeMode,
    quad_per_cell: usize,
    n_det_probes: usize,
) -> Result<SchemeRun> {
    let d = field.dim();
    check_mesh_dim(mesh, field)?;
    cfg.n_steps()?;
    check_sample_times(sample_times, cfg.horizon)?;
    let masses = mesh.cell_masses(rho0, quad_per_cell)?;
    let total: f64 = masses.iter().sum();
    if !(total > 0.0) {
        return Err(Error::invalid("initial density has zero total mass"));
    }
    // Representatives are drawn in cell order from one seeded stream, which
    // is what makes (config, seed) → run reproducible bit for bit.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions = Vec::new();
    let mut weights = Vec::with_capacity(masses.len());
    for (cell, &mass) in masses.iter().enumerate() {
        if mass <= 0.0 {
            continue;
        }
        let mode = match rep_mode {
            RepresentativeMode::Uniform => SampleMode::Uniform,
            RepresentativeMode::Density => SampleMode::Density {
                rho: rho0,
                cell_mass: mass,
            },
        };
        let rep = mesh.sample_representative(cell, &mut rng, &mode)?;
        positions.extend_from_slice(rep.coords());
        weights.push(mass);
    }
    let (traj, flow_diag) =
        euler_flow_diagnostic(field, cfg, &positions, n_det_probes, DET_PROBE_FD_STEP)?;
    let diagnostics = RunDiagnostics {
        step_min_dets: flow_diag.step_min_dets,
        min_step_det: flow_diag.min_step_det,
        bilipschitz_ratios: trajectory_pair_ratios(&traj, n_det_probes),
    };
    let mut snapshots = Vec::with_capacity(sample_times.len());
    for &t in sample_times {
        let mut pos = Vec::with_capacity(weights.len() * d);
        for i in 0..weights.len() {
            pos.extend(traj.position_at(i, t)?);
        }
        snapshots.push(DiscreteMeasure::new(d, &pos, &weights)?);
    }
    Ok(SchemeRun {
        scheme: SchemeKind::Singular,
        dt: cfg.dt,
        n_cells: mesh.n_cells(),
        seed: Some(seed),
        sample_times: sample_times.to_vec(),
        snapshots,
        diagnostics,
    })
}

/// Piecewise-constant cell densities ρ̄_i = M_i / |Q_i|, the default input
/// of the diffuse scheme.
pub fn cellwise_density(mesh: &Mesh, rho: &dyn Density, quad_per_cell: usize) -> Result<Vec<f64>> {
    Ok(mesh
        .cell_masses(rho, quad_per_cell)?
        .iter()
        .zip(&mesh.cells)
        .map(|(m, c)| m / c.volume)
        .collect())
}

/// Runs the diffuse deterministic scheme: each cell's density patch is
/// translated rigidly along the mean Euler flow. The result at each sample
/// time is a quadrature cloud: `snapshot_nodes_per_cell` nodes per cell,
/// each carrying mass ρ̄_i·|Q_i| / nodes. The mean flow itself averages the
/// velocity over `quad_per_cell` nodes per cell; the snapshot resolution is
/// independent so transport against the snapshots stays tractable.
/// Requires declared field integrability p > d.
pub fn run_diffuse(
    field: &VelocityField,
    mesh: &Mesh,
    rho0_bar: &[f64],
    cfg: &FlowConfig,
    sample_times: &[f64],
    quad_per_cell: usize,
    snapshot_nodes_per_cell: usize,
) -> Result<SchemeRun> {
    let d = field.dim();
    check_mesh_dim(mesh, field)?;
    if rho0_bar.len() != mesh.n_cells() {
        return Err(Error::invalid(format!(
            "{} cell densities for {} cells",
            rho0_bar.len(),
            mesh.n_cells()
        )));
    }
    for (i, &r) in rho0_bar.iter().enumerate() {
        if !r.is_finite() || r < 0.0 {
            return Err(Error::invalid(format!(
                "cell density {r} at cell {i} is negative or non-finite"
            )));
        }
    }
    cfg.n_steps()?;
    check_sample_times(sample_times, cfg.horizon)?;
    let total: f64 = rho0_bar
        .iter()
        .zip(&mesh.cells)
        .map(|(r, c)| r * c.volume)
        .sum();
    if !(total > 0.0) {
        return Err(Error::invalid("initial density has zero total mass"));
    }
    let mean = mean_euler_flow(field, cfg, mesh, quad_per_cell)?;
    let cloud = mesh.fixed_quadrature(snapshot_nodes_per_cell)?;
    let mut base_positions = Vec::with_capacity(cloud.n_total * d);
    let mut weights = Vec::with_capacity(cloud.n_total);
    for cell in &mesh.cells {
        let nodes = &cloud.per_cell[cell.id];
        let w = rho0_bar[cell.id] * cell.volume / (nodes.len() / d) as f64;
        base_positions.extend_from_slice(nodes);
        weights.extend(std::iter::repeat_n(w, nodes.len() / d));
    }
    let mut snapshots = Vec::with_capacity(sample_times.len());
    for &t in sample_times {
        let mut pos = Vec::with_capacity(base_positions.len());
        let mut idx = 0usize;
        for cell in &mesh.cells {
            let tau = mean.translation_at(cell.id, t)?;
            for _ in 0..cloud.node_count(cell.id) {
                let node = &base_positions[idx * d..(idx + 1) * d];
                for k in 0..d {
                    pos.push(node[k] + tau[k]);
                }
                idx += 1;
            }
        }
        snapshots.push(DiscreteMeasure::new(d, &pos, &weights)?);
    }
    Ok(SchemeRun {
        scheme: SchemeKind::Diffuse,
        dt: cfg.dt,
        n_cells: mesh.n_cells(),
        seed: None,
        sample_times: sample_times.to_vec(),
        snapshots,
        diagnostics: RunDiagnostics::empty(),
    })
}

/// Deterministic equal-weight point cloud distributed as the probability
/// density `rho`: low-discrepancy rejection in d+1 dimensions, a candidate
/// being accepted when its auxiliary coordinate falls under ρ(x)/sup ρ. The
/// first `n` accepted points are returned as flat coordinates.
pub fn density_cloud(rho: &dyn Density, dim: usize, n: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim + 1 > MAX_DIM {
        return Err(Error::invalid(format!("cloud dimension {dim} out of range")));
    }
    if n == 0 {
        return Err(Error::invalid("cloud needs at least one point"));
    }
    let sup = rho.sup_bound();
    if !(sup > 0.0 && sup.is_finite()) {
        return Err(Error::invalid("density sup bound must be positive and finite"));
    }
    let mut out = Vec::with_capacity(n * dim);
    let mut u = [0.0f64; MAX_DIM];
    let cap = (n as u64).saturating_mul(4000).max(1 << 20);
    let mut j = 0u64;
    while out.len() < n * dim {
        if j >= cap {
            return Err(Error::Capacity(format!(
                "density rejection sampling accepted only {} of {n} points in {cap} candidates",
                out.len() / dim
            )));
        }
        halton_point(j, &mut u[..dim + 1]);
        j += 1;
        let v = rho.eval(&u[..dim]);
        if !v.is_finite() || v < 0.0 {
            return Err(Error::invalid(format!(
                "density sample {v} is negative or non-finite"
            )));
        }
        if u[dim] * sup <= v {
            out.extend_from_slice(&u[..dim]);
        }
    }
    Ok(out)
}

/// Push-forward reference: an equal-weight density cloud advected by the
/// fourth-order reference integrator, reported at every sample time. The
/// cloud carries total mass one, matching the unit-mass density catalog;
/// callers are expected to supply enough particles to dominate the scheme
/// under test (16× its atom count is the working rule). Rough fields are
/// refused — schemes on rough fields compare against their own finest level
/// instead.
pub fn reference_solution(
    field: &VelocityField,
    rho0: &dyn Density,
    sample_times: &[f64],
    n_ref_particles: usize,
    dt_ref: f64,
) -> Result<Vec<DiscreteMeasure>> {
    if field.meta().rough {
        return Err(Error::RoughField(
            "push-forward reference needs a Lipschitz field; compare rough-field \
             schemes against their own finest level instead"
                .to_string(),
        ));
    }
    let d = field.dim();
    if sample_times.is_empty() {
        return Err(Error::invalid("need at least one sample time"));
    }
    let mut tmax = 0.0f64;
    for &t in sample_times {
        if !t.is_finite() || t < -1e-12 {
            return Err(Error::invalid(format!("sample time {t} must be ≥ 0")));
        }
        tmax = tmax.max(t);
    }
    let cloud = density_cloud(rho0, d, n_ref_particles)?;
    let weights = vec![1.0 / n_ref_particles as f64; n_ref_particles];
    if tmax <= 0.0 {
        let frozen = DiscreteMeasure::new(d, &cloud, &weights)?;
        return Ok(vec![frozen; sample_times.len()]);
    }
    let traj = reference_flow(field, tmax, dt_ref, &cloud)?;
    sample_times
        .iter()
        .map(|&t| {
            let mut pos = Vec::with_capacity(cloud.len());
            for i in 0..n_ref_particles {
                pos.extend(traj.position_at(i, t)?);
            }
            DiscreteMeasure::new(d, &pos, &weights)
        })
        .collect()
}

/// Distance between mass-matched measures: the exact solver when both
/// supports fit its budget, otherwise the entropic solver at a small
/// regularization. The flag reports which path ran (`true` = entropic).
pub fn transport_distance(
    a: &DiscreteMeasure,
    b: &DiscreteMeasure,
    metric: &GroundMetric,
) -> Result<(f64, bool)> {
    if a.len() <= EXACT_ATOM_CAP && b.len() <= EXACT_ATOM_CAP {
        Ok((wasserstein_exact(a, b, metric)?.cost, false))
    } else {
        let epsilon = 2.0 * EPSILON_FLOOR_FACTOR * metric.diameter(a.dim());
        let res = wasserstein_entropic(a, b, metric, epsilon, ENTROPIC_FALLBACK_MAX_ITER)?;
        Ok((res.cost, true))
    }
}

/// The reference measure rescaled to a run's total mass. Discretizations of
/// the same ρ₀ agree with the unit reference mass only up to quadrature
/// error; a gap beyond 10⁻³ relative indicates mismatched inputs and is
/// rejected rather than silently absorbed.
fn reference_rescaled(reference: &DiscreteMeasure, target_mass: f64) -> Result<DiscreteMeasure> {
    let mass = reference.total_mass();
    if !(mass > 0.0 && target_mass > 0.0) {
        return Err(Error::invalid("measures must carry positive mass"));
    }
    let factor = target_mass / mass;
    if (factor - 1.0).abs() > REFERENCE_MASS_TOLERANCE {
        return Err(Error::invalid(format!(
            "run mass {target_mass} and reference mass {mass} differ beyond quadrature tolerance"
        )));
    }
    let weights: Vec<f64> = reference.weights().iter().map(|w| w * factor).collect();
    DiscreteMeasure::new(reference.dim(), reference.positions(), &weights)
}

/// One point of an error curve.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ErrorPoint {
    pub t: f64,
    pub distance: f64,
    /// True when the support sizes forced the entropic fallback.
    pub entropic: bool,
}

/// Distances from a run's snapshots to reference measures given at the same
/// sample times (by index). The reference is rescaled to the run's mass
/// first; see `transport_distance` for the solver choice.
pub fn error_curve(
    run: &SchemeRun,
    reference: &[DiscreteMeasure],
    metric: &GroundMetric,
) -> Result<Vec<ErrorPoint>> {
    if reference.len() != run.snapshots.len() {
        return Err(Error::invalid(format!(
            "{} reference measures for {} snapshots",
            reference.len(),
            run.snapshots.len()
        )));
    }
    run.sample_times
        .iter()
        .zip(&run.snapshots)
        .zip(reference)
        .map(|((&t, snap), re)| {
            let re = reference_rescaled(re, snap.total_mass())?;
            let (distance, entropic) = transport_distance(snap, &re, metric)?;
            Ok(ErrorPoint {
                t,
                distance,
                entropic,
            })
        })
        .collect()
}

/// What the Monte Carlo driver aggregates beyond per-replication errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    /// Only the per-replication distances X_i.
    PerRep,
    /// Additionally merge the n replications into S_n = (1/n) Σ ρ_i (a
    /// concatenation of atoms with weights divided by n — exact, no
    /// binning) and record its distance to the reference.
    MeanOfN,
}

/// Empirical exceedance of |X − X̄| > k·s against the Chebyshev bound 1/k².
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ChebyshevCheck {
    pub k: f64,
    pub exceed_count: usize,
    pub fraction: f64,
    pub bound: f64,
}

/// Error statistics at one sample time.
#[derive(Debug, Clone, Serialize)]
pub struct McTimeStats {
    pub t: f64,
    pub mean_error: f64,
    /// Unbiased sample variance of the per-replication errors.
    pub sample_variance: f64,
    pub chebyshev: Vec<ChebyshevCheck>,
    /// Per-replication distances, in replication order.
    pub errors: Vec<f64>,
    pub mean_of_n_error: Option<f64>,
    pub mean_of_n_entropic: Option<bool>,
    /// True when any per-replication distance used the entropic fallback.
    pub entropic_any: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct McSummary {
    pub n_reps: usize,
    pub aggregate: Aggregate,
    pub per_time: Vec<McTimeStats>,
}

impl McSummary {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Runs `n_reps` independent replications of the singular scheme (seeds
/// `base_seed + rep`), measures each against the reference, and aggregates
/// per sample time. Replications execute concurrently; aggregation order is
/// by replication index, so the summary is deterministic.
#[allow(clippy::too_many_arguments)]
pub fn monte_carlo(
    field: &VelocityField,
    mesh: &Mesh,
    rho0: &dyn Density,
    cfg: &FlowConfig,
    metric: &GroundMetric,
    n_reps: usize,
    base_seed: u64,
    sample_times: &[f64],
    aggregate: Aggregate,
    reference: &[DiscreteMeasure],
    rep_mode: RepresentativeMode,
    quad_per_cell: usize,
) -> Result<McSummary> {
    if n_reps < 2 {
        return Err(Error::invalid("need at least two replications"));
    }
    if reference.len() != sample_times.len() {
        return Err(Error::invalid(format!(
            "{} reference measures for {} sample times",
            reference.len(),
            sample_times.len()
        )));
    }
    let runs: Vec<SchemeRun> = (0..n_reps)
        .into_par_iter()
        .map(|rep| {
            run_singular(
                field,
                mesh,
                rho0,
                cfg,
                base_seed + rep as u64,
                sample_times,
                rep_mode,
                quad_per_cell,
                0,
            )
        })
        .collect::<Result<_>>()?;
    // All replications share the cell masses, so one rescale serves all.
    let run_mass = runs[0].snapshots[0].total_mass();
    let refs: Vec<DiscreteMeasure> = reference
        .iter()
        .map(|r| reference_rescaled(r, run_mass))
        .collect::<Result<_>>()?;
    let dists: Vec<Vec<(f64, bool)>> = runs
        .par_iter()
        .map(|run| {
            run.snapshots
                .iter()
                .zip(&refs)
                .map(|(snap, re)| transport_distance(snap, re, metric))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut per_time = Vec::with_capacity(sample_times.len());
    for (ti, &t) in sample_times.iter().enumerate() {
        let errors: Vec<f64> = dists.iter().map(|d| d[ti].0).collect();
        let entropic_any = dists.iter().any(|d| d[ti].1);
        let n = n_reps as f64;
        let mean_error = errors.iter().sum::<f64>() / n;
        let sample_variance = errors
            .iter()
            .map(|x| (x - mean_error) * (x - mean_error))
            .sum::<f64>()
            / (n - 1.0);
        let sd = sample_variance.sqrt();
        let chebyshev = [2.0, 3.0, 5.0]
            .iter()
            .map(|&k| {
                let exceed_count = errors
                    .iter()
                    .filter(|&&x| (x - mean_error).abs() > k * sd)
                    .count();
                ChebyshevCheck {
                    k,
                    exceed_count,
                    fraction: exceed_count as f64 / n,
                    bound: 1.0 / (k * k),
                }
            })
            .collect();
        let (mean_of_n_error, mean_of_n_entropic) = match aggregate {
            Aggregate::PerRep => (None, None),
            Aggregate::MeanOfN => {
                let mut pos = Vec::new();
                let mut w = Vec::new();
                for run in &runs {
                    let snap = &run.snapshots[ti];
                    pos.extend_from_slice(snap.positions());
                    w.extend(snap.weights().iter().map(|wi| wi / n));
                }
                let merged = DiscreteMeasure::new(mesh.dim, &pos, &w)?;
                let (dist, ent) = transport_distance(&merged, &refs[ti], metric)?;
                (Some(dist), Some(ent))
            }
        };
        per_time.push(McTimeStats {
            t,
            mean_error,
            sample_variance,
            chebyshev,
            errors,
            mean_of_n_error,
            mean_of_n_entropic,
            entropic_any,
        });
    }
    Ok(McSummary {
        n_reps,
        aggregate,
        per_time,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{catalog_field, ConstantSpec, FieldSpec, RadialVortexSpec, ShearSineSpec};
    use crate::flow::DeltaRule;
    use crate::mesh::{build_mesh, MeshKind, UniformDensity};
    use crate::transport::splitting_upper_bound;

    fn constant(v: Vec<f64>) -> VelocityField {
        catalog_field(&FieldSpec::Constant(ConstantSpec { velocity: v })).unwrap()
    }

    fn shear() -> VelocityField {
        catalog_field(&FieldSpec::ShearSine(ShearSineSpec {})).unwrap()
    }

    fn vortex(declared_p: f64) -> VelocityField {
        catalog_field(&FieldSpec::RadialVortex(RadialVortexSpec {
            center: [0.5, 0.5],
            alpha: 1.2,
            r_inner: 0.3,
            r_outer: 0.45,
            declared_p,
        }))
        .unwrap()
    }

    fn mesh2(n: usize) -> Mesh {
        build_mesh(MeshKind::Cartesian, 2, n, 0.0, 0).unwrap()
    }

    fn cfg(horizon: f64, dt: f64) -> FlowConfig {
        FlowConfig::new(horizon, dt, DeltaRule::None)
    }

    fn w1() -> GroundMetric {
        GroundMetric::EuclideanTorus
    }

    /// Distance of two wrapped coordinates across the periodic seam.
    fn circ(a: f64, b: f64) -> f64 {
        let d = (a - b).abs();
        d.min(1.0 - d)
    }

    struct ZeroDensity;
    impl Density for ZeroDensity {
        fn eval(&self, _x: &[f64]) -> f64 {
            0.0
        }
        fn sup_bound(&self) -> f64 {
            1.0
        }
    }

    struct LeftHalfDensity;
    impl Density for LeftHalfDensity {
        fn eval(&self, x: &[f64]) -> f64 {
            if x[0] < 0.5 {
                1.0
            } else {
                0.0
            }
        }
        fn sup_bound(&self) -> f64 {
            1.0
        }
    }

    #[test]
    fn static_singular_run_under_zero_velocity() {
        let field = constant(vec![0.0, 0.0]);
        let mesh = mesh2(3);
        let run = run_singular(
            &field,
            &mesh,
            &UniformDensity,
            &cfg(1.0, 0.25),
            7,
            &[0.0, 0.5, 1.0],
            RepresentativeMode::Uniform,
            64,
            0,
        )
        .unwrap();
        assert_eq!(run.scheme, SchemeKind::Singular);
        assert_eq!(run.snapshots.len(), 3);
        assert_eq!(run.snapshots[0].len(), 9);
        for snap in &run.snapshots[1..] {
            assert_eq!(snap.positions(), run.snapshots[0].positions());
            assert_eq!(snap.weights(), run.snapshots[0].weights());
        }
        assert!((run.snapshots[0].total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_field_singular_translates_the_cloud() {
        let c = [0.25, 0.5];
        let field = constant(c.to_vec());
        let mesh = mesh2(3);
        let run = run_singular(
            &field,
            &mesh,
            &UniformDensity,
            &cfg(1.0, 0.25),
            3,
            &[0.0, 0.5, 1.0],
            RepresentativeMode::Uniform,
            64,
            0,
        )
        .unwrap();
        let base = &run.snapshots[0];
        for (idx, t) in [(1usize, 0.5f64), (2, 1.0)] {
            let snap = &run.snapshots[idx];
            assert_eq!(snap.weights(), base.weights());
            for i in 0..base.len() {
                for (k, &ck) in c.iter().enumerate() {
                    let want = wrap_unit(base.position(i)[k] + t * ck);
                    assert!(circ(snap.position(i)[k], want) < 1e-12);
                }
            }
        }
    }

    #[test]
    fn uniform_density_on_cartesian_mesh_gives_equal_masses() {
        let field = constant(vec![0.0, 0.0]);
        let mesh = mesh2(4);
        let run = run_singular(
            &field,
            &mesh,
            &UniformDensity,
            &cfg(1.0, 0.5),
            0,
            &[0.0],
            RepresentativeMode::Uniform,
            64,
            0,
        )
        .unwrap();
        let snap = &run.snapshots[0];
        assert_eq!(snap.len(), 16);
        for i in 0..16 {
            assert!((snap.weight(i) - 1.0 / 16.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_total_mass_is_rejected() {
        let field = constant(vec![0.0, 0.0]);
        let mesh = mesh2(3);
        let err = run_singular(
            &field,
            &mesh,
            &ZeroDensity,
            &cfg(1.0, 0.5),
            0,
            &[0.0],
            RepresentativeMode::Uniform,
            64,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn zero_mass_cells_carry_no_atom() {
        let field = constant(vec![0.0, 0.0]);
        let mesh = mesh2(2);
        let run = run_singular(
            &field,
            &mesh,
            &LeftHalfDensity,
            &cfg(1.0, 0.5),
            11,
            &[0.0],
            RepresentativeMode::Uniform,
            64,
            0,
        )
        .unwrap();
        let snap = &run.snapshots[0];
        assert_eq!(snap.len(), 2);
        assert!((snap.total_mass() - 0.5).abs() < 1e-9);
        for i in 0..snap.len() {
            assert!(snap.position(i)[0] < 0.5);
        }
    }

    #[test]
    fn bad_sample_times_are_rejected() {
        let field = constant(vec![0.0, 0.0]);
        let mesh = mesh2(2);
        for times in [&[][..], &[1.5][..], &[-0.1][..], &[f64::NAN][..]] {
            let err = run_singular(
                &field,
                &mesh,
                &UniformDensity,
                &cfg(1.0, 0.5),
                0,
                times,
                RepresentativeMode::Uniform,
                64,
                0,
            )
            .unwrap_err();
            assert!(matches!(err, Error::InvalidInput(_)));
        }
    }

    #[test]
    fn identical_seeds_reproduce_runs_bitwise() {
        let field = shear();
        let mesh = mesh2(3);
        let mk = |seed| {
            run_singular(
                &field,
                &mesh,
                &UniformDensity,
                &cfg(0.5, 0.125),
                seed,
                &[0.25, 0.5],
                RepresentativeMode::Uniform,
                64,
                0,
            )
            .unwrap()
        };
        let (a, b, c) = (mk(42), mk(42), mk(43));
        for (sa, sb) in a.snapshots.iter().zip(&b.snapshots) {
            assert_eq!(sa.positions(), sb.positions());
            assert_eq!(sa.weights(), sb.weights());
        }
        assert_ne!(a.snapshots[0].positions(), c.snapshots[0].positions());
    }

    #[test]
    fn determinant_and_bilipschitz_diagnostics_are_recorded() {
        let field = shear();
        let mesh = mesh2(3);
        let run = run_singular(
            &field,
            &mesh,
            &UniformDensity,
            &cfg(0.5, 0.125),
            1,
            &[0.5],
            RepresentativeMode::Uniform,
            64,
            4,
        )
        .unwrap();
        let diag = &run.diagnostics;
        assert_eq!(diag.step_min_dets.len(), 4);
        // One shear step is volume-preserving: det(I + Δt ∇u) = 1 exactly.
        assert!((diag.min_step_det.unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(diag.bilipschitz_ratios.len(), 4);
        for &r in &diag.bilipschitz_ratios {
            assert!(r.is_finite() && r > 0.0);
        }
    }

    #[test]
    fn density_mode_keeps_representatives_in_their_cells() {
        let field = constant(vec![0.0, 0.0]);
        let mesh = mesh2(3);
        let rho = SinusoidalDensity::new(0.8).unwrap();
        let run = run_singular(
            &field,
            &mesh,
            &rho,
            &cfg(1.0, 0.5),
            9,
            &[0.0],
            RepresentativeMode::Density,
            64,
            0,
        )
        .unwrap();
        let snap = &run.snapshots[0];
        assert_eq!(snap.len(), 9);
        for i in 0..9 {
            assert_eq!(mesh.locate(snap.position(i)), i);
        }
    }

    #[test]
    fn diffuse_static_under_zero_velocity() {
        let field = constant(vec![0.0, 0.0]);
        let mesh = mesh2(3);
        let rho_bar = cellwise_density(&mesh, &UniformDensity, 64).unwrap();
        let run = run_diffuse(
            &field,
            &mesh,
            &rho_bar,
            &cfg(1.0, 0.25),
            &[0.0, 0.5, 1.0],
            64,
            5,
        )
        .unwrap();
        assert_eq!(run.scheme, SchemeKind::Diffuse);
        assert_eq!(run.seed, None);
        assert_eq!(run.snapshots[0].len(), 45);
        for snap in &run.snapshots[1..] {
            assert_eq!(snap.positions(), run.snapshots[0].positions());
            assert_eq!(snap.weights(), run.snapshots[0].weights());
        }
        assert!((run.snapshots[0].total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diffuse_constant_velocity_translates_rigidly() {
        let c = [0.3, -0.2];
        let field = constant(c.to_vec());
        let mesh = mesh2(3);
        let rho_bar = cellwise_density(&mesh, &UniformDensity, 64).unwrap();
        let run = run_diffuse(
            &field,
            &mesh,
            &rho_bar,
            &cfg(1.0, 0.25),
            &[0.0, 1.0],
            64,
            4,
        )
        .unwrap();
        let (base, moved) = (&run.snapshots[0], &run.snapshots[1]);
        assert_eq!(moved.weights(), base.weights());
        for i in 0..base.len() {
            for (k, &ck) in c.iter().enumerate() {
                let want = wrap_unit(base.position(i)[k] + ck);
                assert!(circ(moved.position(i)[k], want) < 1e-12);
            }
        }
    }

    #[test]
    fn diffuse_mass_is_bitwise_constant() {
        let field = shear();
        let mesh = mesh2(4);
        let rho = SinusoidalDensity::new(0.5).unwrap();
        let rho_bar = cellwise_density(&mesh, &rho, 64).unwrap();
        let run = run_diffuse(
            &field,
            &mesh,
            &rho_bar,
            &cfg(0.5, 0.125),
            &[0.0, 0.25, 0.5],
            64,
            4,
        )
        .unwrap();
        let mass0 = run.snapshots[0].total_mass();
        for snap in &run.snapshots {
            assert_eq!(snap.total_mass().to_bits(), mass0.to_bits());
        }
        let direct: f64 = rho_bar
            .iter()
            .zip(&mesh.cells)
            .map(|(r, c)| r * c.volume)
            .sum();
        assert!((mass0 - direct).abs() < 1e-12);
    }

    #[test]
    fn diffuse_refuses_low_integrability_fields() {
        let field = vortex(1.5);
        let mesh = mesh2(3);
        let rho_bar = vec![1.0; 9];
        let err = run_diffuse(&field, &mesh, &rho_bar, &cfg(0.5, 0.125), &[0.5], 64, 4)
            .unwrap_err();
        assert!(matches!(err, Error::UnsupportedRegime(_)));
    }

    #[test]
    fn reference_translates_under_constant_field() {
        let c = [0.3, -0.2];
        let field = constant(c.to_vec());
        let refs =
            reference_solution(&field, &UniformDensity, &[0.0, 1.0], 256, 0.25).unwrap();
        assert_eq!(refs.len(), 2);
        assert_eq!(refs[0].len(), 256);
        for w in refs[0].weights() {
            assert!((w - 1.0 / 256.0).abs() < 1e-15);
        }
        for i in 0..256 {
            for (k, &ck) in c.iter().enumerate() {
                let want = wrap_unit(refs[0].position(i)[k] + ck);
                assert!(circ(refs[1].position(i)[k], want) < 1e-12);
            }
        }
    }

    #[test]
    fn rough_fields_are_refused_a_reference() {
        let field = vortex(3.0);
        let err = reference_solution(&field, &UniformDensity, &[0.5], 64, 0.125).unwrap_err();
        assert!(matches!(err, Error::RoughField(_)));
    }

    #[test]
    fn reference_matches_direct_quadrature_at_time_zero() {
        // 1-D: the cloud is the base-2 radical-inverse sequence, whose first
        // 512 points are exactly {k/512}; against the midpoint grid the
        // distance is 1/1024, far under twice the spacing.
        let field = constant(vec![0.0]);
        let refs = reference_solution(&field, &UniformDensity, &[0.0], 512, 1.0).unwrap();
        let n = 512;
        let pos: Vec<f64> = (0..n).map(|k| (k as f64 + 0.5) / n as f64).collect();
        let grid = DiscreteMeasure::new(1, &pos, &vec![1.0 / n as f64; n]).unwrap();
        let (d1, _) = transport_distance(&refs[0], &grid, &w1()).unwrap();
        assert!(d1 <= 2.0 / n as f64, "1-D distance {d1}");

        // 2-D: 1024 cloud points vs the 32×32 midpoint grid; expected
        // spacing 1/32.
        let field = constant(vec![0.0, 0.0]);
        let refs = reference_solution(&field, &UniformDensity, &[0.0], 1024, 1.0).unwrap();
        let mut pos = Vec::with_capacity(2 * 1024);
        for i in 0..32 {
            for j in 0..32 {
                pos.push((i as f64 + 0.5) / 32.0);
                pos.push((j as f64 + 0.5) / 32.0);
            }
        }
        let grid = DiscreteMeasure::new(2, &pos, &vec![1.0 / 1024.0; 1024]).unwrap();
        let (d2, _) = transport_distance(&refs[0], &grid, &w1()).unwrap();
        assert!(d2 <= 2.0 / 32.0, "2-D distance {d2}");
    }

    #[test]
    fn error_curve_of_a_run_against_itself_is_zero() {
        let field = shear();
        let mesh = mesh2(3);
        let run = run_singular(
            &field,
            &mesh,
            &UniformDensity,
            &cfg(0.5, 0.125),
            2,
            &[0.0, 0.5],
            RepresentativeMode::Uniform,
            64,
            0,
        )
        .unwrap();
        let curve = error_curve(&run, &run.snapshots, &w1()).unwrap();
        for p in &curve {
            assert!(p.distance.abs() < 1e-12);
            assert!(!p.entropic);
        }
    }

    #[test]
    fn error_curve_is_time_invariant_under_constant_fields() {
        let c = [0.25, -0.125];
        let field = constant(c.to_vec());
        let mesh = mesh2(3);
        let times = [0.0, 1.0];
        let run = run_singular(
            &field,
            &mesh,
            &UniformDensity,
            &cfg(1.0, 0.25),
            5,
            &times,
            RepresentativeMode::Uniform,
            64,
            0,
        )
        .unwrap();
        let refs = reference_solution(&field, &UniformDensity, &times, 256, 0.25).unwrap();
        let curve = error_curve(&run, &refs, &w1()).unwrap();
        assert!((curve[0].distance - curve[1].distance).abs() < 1e-9);
    }

    #[test]
    fn initial_distance_to_reference_is_below_the_cell_diameter() {
        let field = constant(vec![0.0, 0.0]);
        let mesh = mesh2(4);
        let run = run_singular(
            &field,
            &mesh,
            &UniformDensity,
            &cfg(1.0, 0.5),
            17,
            &[0.0],
            RepresentativeMode::Uniform,
            64,
            0,
        )
        .unwrap();
        let refs = reference_solution(&field, &UniformDensity, &[0.0], 1024, 1.0).unwrap();
        let curve = error_curve(&run, &refs, &w1()).unwrap();
        assert!(curve[0].distance > 0.0);
        assert!(curve[0].distance <= mesh.dx, "distance {}", curve[0].distance);
    }

    #[test]
    fn mismatched_masses_are_rejected() {
        let field = constant(vec![0.0, 0.0]);
        let mesh = mesh2(2);
        let run = run_singular(
            &field,
            &mesh,
            &UniformDensity,
            &cfg(1.0, 0.5),
            0,
            &[0.0],
            RepresentativeMode::Uniform,
            64,
            0,
        )
        .unwrap();
        let heavy = DiscreteMeasure::new(2, &[0.1, 0.1], &[1.5]).unwrap();
        let err = error_curve(&run, &[heavy], &w1()).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn monte_carlo_statistics_are_static_under_zero_velocity() {
        let field = constant(vec![0.0, 0.0]);
        let mesh = mesh2(3);
        let times = [0.0, 0.5];
        let refs = reference_solution(&field, &UniformDensity, &times, 512, 0.25).unwrap();
        let summary = monte_carlo(
            &field,
            &mesh,
            &UniformDensity,
            &cfg(1.0, 0.25),
            &w1(),
            6,
            100,
            &times,
            Aggregate::PerRep,
            &refs,
            RepresentativeMode::Uniform,
            64,
        )
        .unwrap();
        assert_eq!(summary.n_reps, 6);
        assert_eq!(summary.per_time.len(), 2);
        let (t0, t1) = (&summary.per_time[0], &summary.per_time[1]);
        // No dynamics: every replication's error is frozen in time.
        assert_eq!(t0.errors, t1.errors);
        assert!(t0.mean_error > 0.0);
        assert!(t0.sample_variance >= 0.0);
        let bounds: Vec<f64> = t0.chebyshev.iter().map(|c| c.bound).collect();
        assert_eq!(bounds, vec![0.25, 1.0 / 9.0, 0.04]);
        for c in &t0.chebyshev {
            assert!(c.exceed_count <= 6);
            assert!((c.fraction - c.exceed_count as f64 / 6.0).abs() < 1e-15);
        }
        assert!(t0.mean_of_n_error.is_none());
        assert!(!t0.entropic_any);
    }

    #[test]
    fn merged_mean_beats_the_average_error() {
        // W(ref, (1/n) Σ ρ_i) ≤ (1/n) Σ W(ref, ρ_i) by convexity of the
        // transport cost in the plan, so the merged error can never exceed
        // the mean error.
        let field = shear();
        let mesh = mesh2(3);
        let times = [0.5];
        let refs = reference_solution(&field, &UniformDensity, &times, 512, 0.125).unwrap();
        let summary = monte_carlo(
            &field,
            &mesh,
            &UniformDensity,
            &cfg(0.5, 0.125),
            &w1(),
            4,
            2000,
            &times,
            Aggregate::MeanOfN,
            &refs,
            RepresentativeMode::Uniform,
            64,
        )
        .unwrap();
        let stats = &summary.per_time[0];
        let merged = stats.mean_of_n_error.unwrap();
        assert!(merged <= stats.mean_error + 1e-9);
        assert_eq!(stats.mean_of_n_entropic, Some(false));
    }

    #[test]
    fn splitting_bound_dominates_the_direct_distance() {
        let field = shear();
        let mesh = mesh2(2);
        let run = run_singular(
            &field,
            &mesh,
            &UniformDensity,
            &cfg(0.5, 0.125),
            5,
            &[0.5],
            RepresentativeMode::Uniform,
            64,
            0,
        )
        .unwrap();
        let snap = &run.snapshots[0];
        assert_eq!(snap.len(), 4);
        let masses = mesh.cell_masses(&UniformDensity, 64).unwrap();

        // Reference cloud with provenance: group the advected particles by
        // the cell their initial position fell in.
        let cloud0 = density_cloud(&UniformDensity, 2, 512).unwrap();
        let traj = reference_flow(&field, 0.5, 0.125, &cloud0).unwrap();
        let fin = traj.final_wrapped();
        let mut parts_pos: Vec<Vec<f64>> = vec![Vec::new(); 4];
        for i in 0..512 {
            let cell = mesh.locate(&cloud0[2 * i..2 * i + 2]);
            parts_pos[cell].extend_from_slice(&fin[2 * i..2 * i + 2]);
        }
        let mut parts_ref = Vec::new();
        let mut parts_run = Vec::new();
        let mut whole_pos = Vec::new();
        let mut whole_w = Vec::new();
        for cell in 0..4 {
            let cnt = parts_pos[cell].len() / 2;
            assert!(cnt > 0, "cell {cell} received no reference particles");
            let w = masses[cell] / cnt as f64;
            parts_ref
                .push(DiscreteMeasure::new(2, &parts_pos[cell], &vec![w; cnt]).unwrap());
            parts_run.push(
                DiscreteMeasure::new(2, snap.position(cell), &[masses[cell]]).unwrap(),
            );
            whole_pos.extend_from_slice(&parts_pos[cell]);
            whole_w.extend(std::iter::repeat_n(w, cnt));
        }
        let whole_ref = DiscreteMeasure::new(2, &whole_pos, &whole_w).unwrap();
        let direct = wasserstein_exact(&whole_ref, snap, &w1()).unwrap().cost;
        let bound = splitting_upper_bound(&parts_ref, &parts_run, &w1()).unwrap();
        assert!(
            direct <= bound + 1e-9,
            "direct {direct} exceeds splitting bound {bound}"
        );
    }

    #[test]
    fn sinusoidal_density_is_positive_and_unit_mass() {
        let rho = SinusoidalDensity::new(0.5).unwrap();
        let mesh = mesh2(8);
        for x in [[0.1, 0.2], [0.25, 0.25], [0.75, 0.25], [0.9, 0.9]] {
            let v = rho.eval(&x);
            assert!((0.5..=1.5).contains(&v));
            assert!(v <= rho.sup_bound());
        }
        let total: f64 = mesh.cell_masses(&rho, 128).unwrap().iter().sum();
        assert!((total - 1.0).abs() < 1e-6, "total {total}");
        assert!(SinusoidalDensity::new(1.0).is_err());
        assert!(SinusoidalDensity::new(-0.1).is_err());
        assert!(SinusoidalDensity::new(f64::NAN).is_err());
    }

    #[test]
    fn truncated_singular_density_is_capped_and_unit_mass() {
        let rho = TruncatedSingularDensity::new(2, &[0.3, 0.7], 1.0, 10.0).unwrap();
        // At the center the truncation is active: ρ = K/Z = sup.
        let at_center = rho.eval(&[0.3, 0.7]);
        assert!((at_center - rho.sup_bound()).abs() < 1e-15);
        // Away from the center the raw density is below the cap.
        let far = rho.eval(&[0.8, 0.2]);
        assert!(far > 0.0 && far < rho.sup_bound());
        let mesh = mesh2(8);
        let total: f64 = mesh.cell_masses(&rho, 512).unwrap().iter().sum();
        assert!((total - 1.0).abs() < 2e-3, "total {total}");
        assert!(TruncatedSingularDensity::new(2, &[0.5, 0.5], 2.0, 10.0).is_err());
        assert!(TruncatedSingularDensity::new(2, &[0.5, 0.5], 0.0, 10.0).is_err());
        assert!(TruncatedSingularDensity::new(2, &[0.5, 0.5], 1.0, 0.0).is_err());
        assert!(TruncatedSingularDensity::new(2, &[0.5], 1.0, 10.0).is_err());
    }

    #[test]
    fn run_directory_roundtrips_snapshots() {
        let field = shear();
        let mesh = mesh2(3);
        let run = run_singular(
            &field,
            &mesh,
            &UniformDensity,
            &cfg(0.5, 0.25),
            21,
            &[0.0, 0.5],
            RepresentativeMode::Uniform,
            64,
            0,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        run.write_dir(dir.path()).unwrap();
        assert!(dir.path().join("run.json").exists());
        let file = std::fs::File::open(dir.path().join("snapshot_001.csv")).unwrap();
        let back = DiscreteMeasure::read_csv(io::BufReader::new(file)).unwrap();
        assert_eq!(back.positions(), run.snapshots[1].positions());
        assert_eq!(back.weights(), run.snapshots[1].weights());
    }
}
