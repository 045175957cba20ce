//! Particle flows driven by a velocity field.
//!
//! The explicit Euler flow advances each particle by Δt times the
//! time-averaged (optionally mollified) velocity at its current position,
//! and is piecewise affine in time on the unwrapped lift: positions wrap
//! only when evaluated, so interpolation between steps never jumps across
//! the periodic seam. The mean flow translates every mesh cell rigidly by
//! the time-and-cell average of the velocity over the translated cell; no
//! representative point enters the update, so two different representative
//! choices produce identical translations by construction.
//!
//! A classical fourth-order reference integrator is provided for smooth
//! fields (it refuses rough ones), together with flow diagnostics: Jacobian
//! determinants of the one-step and composite maps, bi-Lipschitz ratio
//! probes, and weighted discrepancy norms between two flows.

use crate::error::{Error, Result};
use crate::fields::{mollify, time_averaged_velocity_raw, MollifierKernel, MollifierProfile, VelocityField};
use crate::mesh::Mesh;
use crate::qmc::MAX_DIM;
use crate::torus::{periodic_distance_slice, wrap_unit};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::borrow::Cow;
use std::io;

/// How the mollification width δ is chosen for a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaRule {
    /// δ = √Δt, the coupling used in the low-integrability regime.
    SqrtDt,
    /// Evaluate the field directly.
    None,
    /// A fixed width in (0, 1/4].
    Explicit(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Horizon T; must be an integer number of steps.
    pub horizon: f64,
    pub dt: f64,
    pub delta_rule: DeltaRule,
    /// Midpoint subintervals for the per-step time average.
    pub n_quad_time: usize,
    pub mollifier_profile: MollifierProfile,
    /// Quadrature points per axis for mollified evaluation.
    pub mollifier_quad: usize,
}

impl FlowConfig {
    pub fn new(horizon: f64, dt: f64, delta_rule: DeltaRule) -> Self {
        FlowConfig {
            horizon,
            dt,
            delta_rule,
            n_quad_time: 4,
            mollifier_profile: MollifierProfile::Bump,
            mollifier_quad: 12,
        }
    }

    /// The default regime split: declared integrability p ≤ d takes the
    /// √Δt mollification, p > d evaluates the field directly.
    pub fn default_for(horizon: f64, dt: f64, p: f64, dim: usize) -> Self {
        let rule = if p <= dim as f64 {
            DeltaRule::SqrtDt
        } else {
            DeltaRule::None
        };
        FlowConfig::new(horizon, dt, rule)
    }

    /// Validates the configuration and returns the step count.
    pub fn n_steps(&self) -> Result<usize> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::invalid("horizon must be positive and finite"));
        }
        if !(self.dt > 0.0 && self.dt <= self.horizon) {
            return Err(Error::invalid("dt must lie in (0, horizon]"));
        }
        let steps = (self.horizon / self.dt).round();
        if steps < 1.0 || (self.horizon - steps * self.dt).abs() > 1e-9 * self.horizon {
            return Err(Error::invalid(format!(
                "horizon {} is not an integer number of steps of {}",
                self.horizon, self.dt
            )));
        }
        if self.n_quad_time < 1 {
            return Err(Error::invalid("n_quad_time must be ≥ 1"));
        }
        if let DeltaRule::Explicit(delta) = self.delta_rule {
            if !(delta > 0.0 && delta <= 0.25) {
                return Err(Error::invalid("explicit δ must lie in (0, 1/4]"));
            }
        }
        Ok(steps as usize)
    }

    /// The mollification width this configuration implies, if any.
    pub fn resolve_delta(&self) -> Option<f64> {
        match self.delta_rule {
            DeltaRule::SqrtDt => Some(self.dt.sqrt()),
            DeltaRule::None => None,
            DeltaRule::Explicit(delta) => Some(delta),
        }
    }
}

/// The field the scheme actually evaluates: mollified per the rule, or the
/// base field itself.
fn effective_field<'a>(
    field: &'a VelocityField,
    config: &FlowConfig,
) -> Result<Cow<'a, VelocityField>> {
    match config.resolve_delta() {
        Option::None => Ok(Cow::Borrowed(field)),
        Some(delta) => {
            if delta > 0.25 {
                return Err(Error::invalid(format!(
                    "mollification width δ = {delta:.4} exceeds 1/4; decrease dt \
                     or choose an explicit width"
                )));
            }
            let kernel = MollifierKernel::new(config.mollifier_profile, field.dim())?;
            Ok(Cow::Owned(mollify(
                field,
                delta,
                kernel,
                config.mollifier_quad,
            )?))
        }
    }
}

fn validate_initial(initial: &[f64], dim: usize) -> Result<usize> {
    if initial.is_empty() || !initial.len().is_multiple_of(dim) {
        return Err(Error::invalid(format!(
            "initial positions length {} is not a multiple of d = {dim}",
            initial.len()
        )));
    }
    if initial.iter().any(|c| !c.is_finite()) {
        return Err(Error::invalid("initial positions must be finite"));
    }
    Ok(initial.len() / dim)
}

fn check_horizon(field: &VelocityField, horizon: f64) -> Result<()> {
    if horizon > field.meta().t_max {
        return Err(Error::invalid(format!(
            "horizon {horizon} exceeds the field's time range {}",
            field.meta().t_max
        )));
    }
    Ok(())
}

/// A particle flow stored as unwrapped lifted frames, one per step.
#[derive(Debug, Clone)]
pub struct FlowTrajectory {
    dim: usize,
    n_particles: usize,
    dt: f64,
    frames: Vec<Vec<f64>>,
}

impl FlowTrajectory {
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn n_particles(&self) -> usize {
        self.n_particles
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn n_steps(&self) -> usize {
        self.frames.len() - 1
    }
    pub fn horizon(&self) -> f64 {
        self.dt * self.n_steps() as f64
    }

    /// Unwrapped positions after `step` steps, flat n × d.
    pub fn lifted_frame(&self, step: usize) -> &[f64] {
        &self.frames[step]
    }

    /// Wrapped positions after `step` steps, flat n × d.
    pub fn wrapped_frame(&self, step: usize) -> Vec<f64> {
        self.frames[step].iter().map(|&c| wrap_unit(c)).collect()
    }

    pub fn final_wrapped(&self) -> Vec<f64> {
        self.wrapped_frame(self.n_steps())
    }

    /// Unwrapped position of one particle at arbitrary t ∈ [0, T]: affine
    /// interpolation between the surrounding step frames.
    pub fn lifted_at(&self, particle: usize, t: f64) -> Result<Vec<f64>> {
        if particle >= self.n_particles {
            return Err(Error::invalid(format!("no particle {particle}")));
        }
        let horizon = self.horizon();
        if !t.is_finite() || t < -1e-12 || t > horizon + 1e-12 {
            return Err(Error::invalid(format!(
                "time {t} outside the trajectory range [0, {horizon}]"
            )));
        }
        let s = (t / self.dt).clamp(0.0, self.n_steps() as f64);
        let n = (s.floor() as usize).min(self.n_steps() - 1);
        let theta = s - n as f64;
        let a = &self.frames[n][particle * self.dim..(particle + 1) * self.dim];
        let b = &self.frames[n + 1][particle * self.dim..(particle + 1) * self.dim];
        Ok(a.iter()
            .zip(b)
            .map(|(&x, &y)| (1.0 - theta) * x + theta * y)
            .collect())
    }

    /// Wrapped position of one particle at arbitrary t ∈ [0, T].
    pub fn position_at(&self, particle: usize, t: f64) -> Result<Vec<f64>> {
        Ok(self
            .lifted_at(particle, t)?
            .into_iter()
            .map(wrap_unit)
            .collect())
    }

    /// Writes the wrapped trajectory as CSV: t, particle, x1..xd.
    pub fn write_csv<W: io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["t".to_string(), "particle".to_string()];
        header.extend((1..=self.dim).map(|k| format!("x{k}")));
        w.write_record(&header).map_err(csv_error)?;
        for (step, frame) in self.frames.iter().enumerate() {
            let t = step as f64 * self.dt;
            for i in 0..self.n_particles {
                let mut rec = vec![format!("{t}"), format!("{i}")];
                rec.extend(
                    frame[i * self.dim..(i + 1) * self.dim]
                        .iter()
                        .map(|&c| format!("{}", wrap_unit(c))),
                );
                w.write_record(&rec).map_err(csv_error)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("csv: {other:?}")),
    }
}

/// Per-step one-step-map determinant diagnostics along the flow.
#[derive(Debug, Clone)]
pub struct FlowDiagnostics {
    /// Minimum over probes of det(I + Δt ∇v̄) per step.
    pub step_min_dets: Vec<f64>,
    pub min_step_det: Option<f64>,
}

/// Advances `initial` (flat n × d, finite, not necessarily wrapped) through
/// the explicit Euler flow of `field` under `config`.
pub fn euler_flow(
    field: &VelocityField,
    config: &FlowConfig,
    initial: &[f64],
) -> Result<FlowTrajectory> {
    euler_flow_diagnostic(field, config, initial, 0, 1e-5).map(|(traj, _)| traj)
}

/// As `euler_flow`, additionally probing the one-step Jacobian determinant
/// at the first `n_det_probes` particles before every step.
pub fn euler_flow_diagnostic(
    field: &VelocityField,
    config: &FlowConfig,
    initial: &[f64],
    n_det_probes: usize,
    fd_step: f64,
) -> Result<(FlowTrajectory, FlowDiagnostics)> {
    let d = field.dim();
    let n = validate_initial(initial, d)?;
    let n_steps = config.n_steps()?;
    check_horizon(field, config.horizon)?;
    if n_det_probes > 0 {
        check_fd_step(fd_step)?;
    }
    let u = effective_field(field, config)?;
    let u = u.as_ref();
    let dt = config.dt;
    let nq = config.n_quad_time;
    let probes = n_det_probes.min(n);

    let mut frames = Vec::with_capacity(n_steps + 1);
    frames.push(initial.to_vec());
    let mut step_min_dets = Vec::with_capacity(if probes > 0 { n_steps } else { 0 });
    for step in 0..n_steps {
        let t0 = step as f64 * dt;
        let t1 = t0 + dt;
        if probes > 0 {
            let mut min_det = f64::INFINITY;
            for i in 0..probes {
                let x = &frames[step][i * d..(i + 1) * d];
                min_det = min_det.min(one_step_determinant(u, t0, t1, dt, nq, x, fd_step));
            }
            step_min_dets.push(min_det);
        }
        let mut next = frames[step].clone();
        next.par_chunks_mut(d).for_each(|chunk| {
            let mut xw = [0.0f64; MAX_DIM];
            for k in 0..d {
                xw[k] = wrap_unit(chunk[k]);
            }
            let mut v = [0.0f64; MAX_DIM];
            time_averaged_velocity_raw(u, t0, t1, &xw[..d], nq, &mut v[..d]);
            for k in 0..d {
                chunk[k] += dt * v[k];
            }
        });
        frames.push(next);
    }
    let min_step_det = step_min_dets.iter().copied().reduce(f64::min);
    Ok((
        FlowTrajectory {
            dim: d,
            n_particles: n,
            dt,
            frames,
        },
        FlowDiagnostics {
            step_min_dets,
            min_step_det,
        },
    ))
}

fn check_fd_step(fd_step: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&fd_step) {
        return Err(Error::invalid(format!(
            "finite-difference step {fd_step} outside [1e-7, 1e-3]"
        )));
    }
    Ok(())
}

/// det(I + Δt ∇v̄)(x) for the one-step map, central finite differences on
/// the step's time-averaged velocity. Differences velocities, not
/// positions, so probes may straddle the periodic seam freely.
fn one_step_determinant(
    u: &VelocityField,
    t0: f64,
    t1: f64,
    dt: f64,
    nq: usize,
    x: &[f64],
    h: f64,
) -> f64 {
    let d = x.len();
    let mut jac = [0.0f64; MAX_DIM * MAX_DIM];
    let mut xp = [0.0f64; MAX_DIM];
    let mut vp = [0.0f64; MAX_DIM];
    let mut vm = [0.0f64; MAX_DIM];
    for k in 0..d {
        xp[..d].copy_from_slice(x);
        xp[k] = wrap_unit(x[k] + h);
        time_averaged_velocity_raw(u, t0, t1, &xp[..d], nq, &mut vp[..d]);
        xp[k] = wrap_unit(x[k] - h);
        time_averaged_velocity_raw(u, t0, t1, &xp[..d], nq, &mut vm[..d]);
        for j in 0..d {
            jac[j * d + k] = dt * (vp[j] - vm[j]) / (2.0 * h);
        }
    }
    for j in 0..d {
        jac[j * d + j] += 1.0;
    }
    small_determinant(&mut jac, d)
}

/// Determinant of a small d × d matrix by partial-pivot elimination.
fn small_determinant(a: &mut [f64], d: usize) -> f64 {
    let mut det = 1.0;
    for col in 0..d {
        let pivot = (col..d)
            .max_by(|&r, &s| a[r * d + col].abs().total_cmp(&a[s * d + col].abs()))
            .unwrap();
        if a[pivot * d + col] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            for k in 0..d {
                a.swap(pivot * d + k, col * d + k);
            }
            det = -det;
        }
        det *= a[col * d + col];
        for r in col + 1..d {
            let f = a[r * d + col] / a[col * d + col];
            for k in col..d {
                a[r * d + k] -= f * a[col * d + k];
            }
        }
    }
    det
}

/// Rigid per-cell translations under the mean flow.
#[derive(Debug, Clone)]
pub struct MeanFlowTrajectory {
    dim: usize,
    n_cells: usize,
    dt: f64,
    /// Translation vectors per step, flat n_cells × d, unwrapped.
    frames: Vec<Vec<f64>>,
}

impl MeanFlowTrajectory {
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn n_cells(&self) -> usize {
        self.n_cells
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn n_steps(&self) -> usize {
        self.frames.len() - 1
    }

    /// Accumulated translation of a cell after `step` steps.
    pub fn translation(&self, cell: usize, step: usize) -> &[f64] {
        &self.frames[step][cell * self.dim..(cell + 1) * self.dim]
    }

    /// Where a point of the cell sits after `step` steps (wrapped).
    pub fn transported(&self, cell: usize, x0: &[f64], step: usize) -> Vec<f64> {
        let tau = self.translation(cell, step);
        x0.iter()
            .zip(tau)
            .map(|(&x, &t)| wrap_unit(x + t))
            .collect()
    }

    /// Affine-in-time translation at arbitrary t ∈ [0, T].
    pub fn translation_at(&self, cell: usize, t: f64) -> Result<Vec<f64>> {
        if cell >= self.n_cells {
            return Err(Error::invalid(format!("no cell {cell}")));
        }
        let horizon = self.dt * self.n_steps() as f64;
        if !t.is_finite() || t < -1e-12 || t > horizon + 1e-12 {
            return Err(Error::invalid(format!(
                "time {t} outside the trajectory range [0, {horizon}]"
            )));
        }
        let s = (t / self.dt).clamp(0.0, self.n_steps() as f64);
        let n = (s.floor() as usize).min(self.n_steps() - 1);
        let theta = s - n as f64;
        let a = self.translation(cell, n);
        let b = self.translation(cell, n + 1);
        Ok(a.iter()
            .zip(b)
            .map(|(&x, &y)| (1.0 - theta) * x + theta * y)
            .collect())
    }
}

/// Advances the mean flow: every cell moves rigidly by Δt times the
/// time-and-cell average of the velocity over the cell translated so far.
/// The cell average uses the same quadrature nodes as the cell masses,
/// translated along. Requires declared integrability p > d.
pub fn mean_euler_flow(
    field: &VelocityField,
    config: &FlowConfig,
    mesh: &Mesh,
    quad_per_cell: usize,
) -> Result<MeanFlowTrajectory> {
    let d = field.dim();
    if mesh.dim != d {
        return Err(Error::invalid(format!(
            "mesh dimension {} does not match field dimension {d}",
            mesh.dim
        )));
    }
    if field.meta().integrability <= d as f64 {
        return Err(Error::UnsupportedRegime(format!(
            "mean flow requires declared integrability p > d = {d}, got p = {}",
            field.meta().integrability
        )));
    }
    let n_steps = config.n_steps()?;
    check_horizon(field, config.horizon)?;
    let u = effective_field(field, config)?;
    let u = u.as_ref();
    let quad = mesh.quadrature(quad_per_cell)?;
    let dt = config.dt;
    let nq = config.n_quad_time;
    let n_cells = mesh.n_cells();

    let mut frames = Vec::with_capacity(n_steps + 1);
    frames.push(vec![0.0f64; n_cells * d]);
    for step in 0..n_steps {
        let t0 = step as f64 * dt;
        let t1 = t0 + dt;
        let prev = &frames[step];
        let mut next = prev.clone();
        next.par_chunks_mut(d).enumerate().for_each(|(cell, tau)| {
            let nodes = &quad.per_cell[cell];
            let n_nodes = nodes.len() / d;
            let mut acc = [0.0f64; MAX_DIM];
            let mut xw = [0.0f64; MAX_DIM];
            let mut v = [0.0f64; MAX_DIM];
            for node in nodes.chunks_exact(d) {
                for k in 0..d {
                    xw[k] = wrap_unit(node[k] + tau[k]);
                }
                time_averaged_velocity_raw(u, t0, t1, &xw[..d], nq, &mut v[..d]);
                for k in 0..d {
                    acc[k] += v[k];
                }
            }
            for k in 0..d {
                tau[k] += dt * acc[k] / n_nodes as f64;
            }
        });
        frames.push(next);
    }
    Ok(MeanFlowTrajectory {
        dim: d,
        n_cells,
        dt,
        frames,
    })
}

/// High-order reference flow: classical fourth-order Runge–Kutta at a fine
/// step. Refuses rough fields — their gradient blows up somewhere and the
/// integrator's error control would be meaningless.
pub fn reference_flow(
    field: &VelocityField,
    horizon: f64,
    dt_ref: f64,
    initial: &[f64],
) -> Result<FlowTrajectory> {
    if field.meta().rough {
        return Err(Error::RoughField(
            "reference integration needs a Lipschitz field; rough fields \
             compare scheme against scheme at finer resolution instead"
                .to_string(),
        ));
    }
    let d = field.dim();
    let n = validate_initial(initial, d)?;
    let config_check = FlowConfig::new(horizon, dt_ref, DeltaRule::None);
    let n_steps = config_check.n_steps()?;
    check_horizon(field, horizon)?;

    let mut frames = Vec::with_capacity(n_steps + 1);
    frames.push(initial.to_vec());
    for step in 0..n_steps {
        let t = step as f64 * dt_ref;
        let h = dt_ref;
        let mut next = frames[step].clone();
        next.par_chunks_mut(d).for_each(|x| {
            let mut k1 = [0.0f64; MAX_DIM];
            let mut k2 = [0.0f64; MAX_DIM];
            let mut k3 = [0.0f64; MAX_DIM];
            let mut k4 = [0.0f64; MAX_DIM];
            let mut y = [0.0f64; MAX_DIM];
            let eval = |tt: f64, pos: &[f64], out: &mut [f64]| {
                let mut w = [0.0f64; MAX_DIM];
                for k in 0..d {
                    w[k] = wrap_unit(pos[k]);
                }
                field.eval_raw(tt, &w[..d], out);
            };
            eval(t, x, &mut k1[..d]);
            for k in 0..d {
                y[k] = x[k] + 0.5 * h * k1[k];
            }
            eval(t + 0.5 * h, &y[..d], &mut k2[..d]);
            for k in 0..d {
                y[k] = x[k] + 0.5 * h * k2[k];
            }
            eval(t + 0.5 * h, &y[..d], &mut k3[..d]);
            for k in 0..d {
                y[k] = x[k] + h * k3[k];
            }
            eval(t + h, &y[..d], &mut k4[..d]);
            for k in 0..d {
                x[k] += h / 6.0 * (k1[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k]);
            }
        });
        frames.push(next);
    }
    Ok(FlowTrajectory {
        dim: d,
        n_particles: n,
        dt: dt_ref,
        frames,
    })
}

/// Jacobian determinants of the composite Euler flow map at time `t` for a
/// batch of probe points, by central finite differences of the flowed
/// probe positions (unwrapped lifts, so seam crossings cannot corrupt the
/// differences). All 2d·n probes share a single advection pass, which is
/// what makes determinant surveys over thousands of points affordable.
pub fn flow_jacobian_determinants(
    field: &VelocityField,
    config: &FlowConfig,
    points: &[f64],
    t: f64,
    fd_step: f64,
) -> Result<Vec<f64>> {
    let d = field.dim();
    if points.is_empty() || !points.len().is_multiple_of(d) {
        return Err(Error::invalid(
            "probe points must be a nonempty multiple of the dimension",
        ));
    }
    check_fd_step(fd_step)?;
    let n = points.len() / d;
    let mut initial = Vec::with_capacity(2 * d * d * n);
    for p in 0..n {
        let x0 = &points[p * d..(p + 1) * d];
        for k in 0..d {
            for sign in [1.0, -1.0] {
                let mut probe = x0.to_vec();
                probe[k] += sign * fd_step;
                initial.extend_from_slice(&probe);
            }
        }
    }
    let traj = euler_flow(field, config, &initial)?;
    let mut dets = Vec::with_capacity(n);
    for p in 0..n {
        let base = p * 2 * d;
        let mut jac = [0.0f64; MAX_DIM * MAX_DIM];
        for k in 0..d {
            let plus = traj.lifted_at(base + 2 * k, t)?;
            let minus = traj.lifted_at(base + 2 * k + 1, t)?;
            for j in 0..d {
                jac[j * d + k] = (plus[j] - minus[j]) / (2.0 * fd_step);
            }
        }
        dets.push(small_determinant(&mut jac, d));
    }
    Ok(dets)
}

/// Single-point convenience wrapper around [`flow_jacobian_determinants`].
pub fn flow_jacobian_determinant(
    field: &VelocityField,
    config: &FlowConfig,
    x0: &[f64],
    t: f64,
    fd_step: f64,
) -> Result<f64> {
    if x0.len() != field.dim() {
        return Err(Error::invalid("probe point has wrong dimension"));
    }
    let dets = flow_jacobian_determinants(field, config, x0, t, fd_step)?;
    Ok(dets[0])
}

/// Ratios d(Φ(x), Φ(y)) / d(x, y) at the final time for probe pairs.
pub fn bilipschitz_probe(
    field: &VelocityField,
    config: &FlowConfig,
    pairs: &[(Vec<f64>, Vec<f64>)],
) -> Result<Vec<f64>> {
    let d = field.dim();
    if pairs.is_empty() {
        return Err(Error::invalid("need at least one probe pair"));
    }
    let mut initial = Vec::with_capacity(2 * d * pairs.len());
    for (x, y) in pairs {
        if x.len() != d || y.len() != d {
            return Err(Error::invalid("probe pair has wrong dimension"));
        }
        if periodic_distance_slice(x, y) < 1e-12 {
            return Err(Error::invalid(
                "probe pair is (numerically) a single point",
            ));
        }
        initial.extend_from_slice(x);
        initial.extend_from_slice(y);
    }
    let traj = euler_flow(field, config, &initial)?;
    let fin = traj.final_wrapped();
    let mut ratios = Vec::with_capacity(pairs.len());
    for (i, (x, y)) in pairs.iter().enumerate() {
        let a = &fin[(2 * i) * d..(2 * i + 1) * d];
        let b = &fin[(2 * i + 1) * d..(2 * i + 2) * d];
        ratios.push(periodic_distance_slice(a, b) / periodic_distance_slice(x, y));
    }
    Ok(ratios)
}

/// Weighted discrepancy between two flows at their final frames.
#[derive(Debug, Clone, Copy)]
pub struct Discrepancy {
    /// (Σ w_i d_i^p)^{1/p} with normalized weights.
    pub lp: f64,
    pub sup: f64,
    /// Trajectory-wise average Σ w_i d_i.
    pub mean: f64,
}

pub fn discrepancy_norms(
    a: &FlowTrajectory,
    b: &FlowTrajectory,
    weights: Option<&[f64]>,
    p: f64,
) -> Result<Discrepancy> {
    if a.dim != b.dim || a.n_particles != b.n_particles {
        return Err(Error::invalid(
            "trajectories must agree in dimension and particle count",
        ));
    }
    if !(p >= 1.0 && p.is_finite()) {
        return Err(Error::invalid("discrepancy exponent must satisfy 1 ≤ p < ∞"));
    }
    let n = a.n_particles;
    let w_sum: f64 = match weights {
        Some(w) => {
            if w.len() != n {
                return Err(Error::invalid("weight vector length mismatch"));
            }
            if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                return Err(Error::invalid("weights must be finite and ≥ 0"));
            }
            let s: f64 = w.iter().sum();
            if s <= 0.0 {
                return Err(Error::invalid("weights must not all vanish"));
            }
            s
        }
        Option::None => n as f64,
    };
    let fa = a.final_wrapped();
    let fb = b.final_wrapped();
    let d = a.dim;
    let mut lp = 0.0;
    let mut sup = 0.0f64;
    let mut mean = 0.0;
    for i in 0..n {
        let di = periodic_distance_slice(&fa[i * d..(i + 1) * d], &fb[i * d..(i + 1) * d]);
        let wi = weights.map_or(1.0, |w| w[i]) / w_sum;
        lp += wi * di.powf(p);
        mean += wi * di;
        sup = sup.max(di);
    }
    Ok(Discrepancy {
        lp: lp.powf(1.0 / p),
        sup,
        mean,
    })
}
