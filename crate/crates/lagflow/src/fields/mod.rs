//! Velocity fields u : [0,T] × 𝕋^d → ℝ^d.
//!
//! A field carries declared regularity metadata alongside its evaluation
//! rule: the Sobolev integrability exponent p of its spatial gradient, a sup
//! norm bound, a bound on the negative part of its divergence, and flags for
//! exact divergence-freeness and for "rough" entries whose gradient blows up
//! somewhere (those are refused by the high-order reference integrator).
//!
//! Three kinds share one evaluation interface: closed-form catalog entries,
//! periodic sample grids with multilinear interpolation, and mollified
//! wrappers u_δ = η_δ ∗ u evaluated by kernel quadrature.

mod analytic;
mod grid;
mod kernel;
mod mollify;

pub use analytic::{AnalyticField, RadialCutoff};
pub use grid::{GridField, GRID_MAGIC};
pub use kernel::{MollifierKernel, MollifierProfile};
pub use mollify::MollifiedField;

use crate::error::{Error, Result};
use crate::qmc::MAX_DIM;
use crate::torus::TorusPoint;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Declared regularity and bounds. `integrability` is the exponent p with
/// Du ∈ L^p declared by the constructor; it is metadata the schemes branch
/// on, not something evaluation enforces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldMeta {
    pub dim: usize,
    /// Declared exponent p > 1 (f64::INFINITY for Lipschitz entries).
    pub integrability: f64,
    /// True upper bound on ‖u‖_∞.
    pub sup_norm: f64,
    /// Upper bound on ‖(div u)⁻‖_∞.
    pub div_minus_bound: f64,
    /// Exactly divergence-free (closed forms; survives mollification).
    pub divergence_free: bool,
    /// Gradient unbounded somewhere; high-order reference flows refuse it.
    pub rough: bool,
    /// Time horizon; `f64::INFINITY` for autonomous entries.
    pub t_max: f64,
}

#[derive(Debug, Clone)]
pub enum FieldKind {
    Analytic(AnalyticField),
    Grid(GridField),
    Mollified(MollifiedField),
    /// u(t,x) = (Σ_k c_k t^k, 0, …): spatially constant, polynomial in
    /// time. Only exists in unit-test builds, where the time-quadrature
    /// examples need a genuinely smooth-in-time integrand.
    #[cfg(test)]
    TimePoly(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct VelocityField {
    kind: FieldKind,
    meta: FieldMeta,
}

impl VelocityField {
    pub fn new(kind: FieldKind, meta: FieldMeta) -> Self {
        VelocityField { kind, meta }
    }

    pub fn dim(&self) -> usize {
        self.meta.dim
    }

    pub fn meta(&self) -> &FieldMeta {
        &self.meta
    }

    pub fn kind(&self) -> &FieldKind {
        &self.kind
    }

    /// Evaluates u(t, x) with full input validation.
    pub fn eval(&self, t: f64, x: &TorusPoint) -> Result<Vec<f64>> {
        self.check_time(t)?;
        if x.dim() != self.dim() {
            return Err(Error::invalid(format!(
                "point dimension {} vs field dimension {}",
                x.dim(),
                self.dim()
            )));
        }
        let mut out = vec![0.0; self.dim()];
        self.eval_raw(t, x.coords(), &mut out);
        Ok(out)
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !t.is_finite() || t < 0.0 || t > self.meta.t_max {
            return Err(Error::invalid(format!(
                "time {t} outside [0, {}]",
                self.meta.t_max
            )));
        }
        Ok(())
    }

    /// Unchecked hot-path evaluation; `x` must be canonical torus
    /// coordinates of the field's dimension and `t` within the horizon.
    #[inline]
    pub fn eval_raw(&self, t: f64, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim());
        match &self.kind {
            FieldKind::Analytic(a) => a.eval(x, out),
            FieldKind::Grid(g) => g.eval_raw(t, x, out),
            FieldKind::Mollified(m) => m.eval_raw(t, x, out),
            #[cfg(test)]
            FieldKind::TimePoly(coeffs) => {
                out.iter_mut().for_each(|o| *o = 0.0);
                out[0] = coeffs.iter().rev().fold(0.0, |acc, c| acc * t + c);
            }
        }
    }
}

/// Test-only: planar field (Σ c_k t^k, 0) with horizon `t_max`.
#[cfg(test)]
pub(crate) fn time_poly_field(coeffs: Vec<f64>, t_max: f64) -> VelocityField {
    let sup = coeffs.iter().map(|c| c.abs()).sum();
    VelocityField::new(
        FieldKind::TimePoly(coeffs),
        FieldMeta {
            dim: 2,
            integrability: f64::INFINITY,
            sup_norm: sup,
            div_minus_bound: 0.0,
            divergence_free: true,
            rough: false,
            t_max,
        },
    )
}

/// Mollifies a field: u_δ = η_δ ∗ u by kernel quadrature. The result keeps
/// the base's sup norm (Young), divergence metadata, and horizon, clears the
/// rough flag (u_δ is (C/δ)-Lipschitz), and is itself a `VelocityField`.
pub fn mollify(
    field: &VelocityField,
    delta: f64,
    kernel: MollifierKernel,
    quad_points_per_axis: usize,
) -> Result<VelocityField> {
    let meta = FieldMeta {
        rough: false,
        ..field.meta.clone()
    };
    let mollified = MollifiedField::new(field.clone(), delta, kernel, quad_points_per_axis)?;
    Ok(VelocityField {
        kind: FieldKind::Mollified(mollified),
        meta,
    })
}

/// ⨍_{t_a}^{t_b} u(s, x) ds by the composite midpoint rule with `n_quad`
/// subintervals. Exact for fields constant or affine in time.
pub fn time_averaged_velocity(
    field: &VelocityField,
    t_a: f64,
    t_b: f64,
    x: &TorusPoint,
    n_quad: usize,
) -> Result<Vec<f64>> {
    if !(t_a < t_b) {
        return Err(Error::invalid(format!(
            "need t_a < t_b, got [{t_a}, {t_b}]"
        )));
    }
    field.check_time(t_a)?;
    field.check_time(t_b)?;
    if n_quad < 1 {
        return Err(Error::invalid("n_quad must be ≥ 1"));
    }
    if x.dim() != field.dim() {
        return Err(Error::invalid("point/field dimension mismatch"));
    }
    let mut out = vec![0.0; field.dim()];
    time_averaged_velocity_raw(field, t_a, t_b, x.coords(), n_quad, &mut out);
    Ok(out)
}

/// Unchecked midpoint time average into `out`.
#[inline]
pub(crate) fn time_averaged_velocity_raw(
    field: &VelocityField,
    t_a: f64,
    t_b: f64,
    x: &[f64],
    n_quad: usize,
    out: &mut [f64],
) {
    let d = out.len();
    let h = (t_b - t_a) / n_quad as f64;
    if n_quad == 1 {
        field.eval_raw(t_a + 0.5 * h, x, out);
        return;
    }
    let mut tmp = [0.0f64; MAX_DIM];
    out.iter_mut().for_each(|o| *o = 0.0);
    for k in 0..n_quad {
        let t = t_a + (k as f64 + 0.5) * h;
        field.eval_raw(t, x, &mut tmp[..d]);
        for c in 0..d {
            out[c] += tmp[c];
        }
    }
    let inv = 1.0 / n_quad as f64;
    out.iter_mut().for_each(|o| *o *= inv);
}

/// Catalog construction specs; serializable so experiment configs can name
/// fields declaratively. Unknown names and unknown keys are rejected at
/// parse time (the payloads live in dedicated structs because serde's
/// internally tagged enums do not propagate `deny_unknown_fields` to struct
/// variants).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum FieldSpec {
    Constant(ConstantSpec),
    ShearSine(ShearSineSpec),
    RigidRotationPatch(RotationPatchSpec),
    RadialVortex(RadialVortexSpec),
    SampledRandomDivfree(SampledSpec),
    GridFile(GridFileSpec),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantSpec {
    pub velocity: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShearSineSpec {}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RotationPatchSpec {
    #[serde(default = "default_center")]
    pub center: [f64; 2],
    pub omega: f64,
    #[serde(default = "default_r_in")]
    pub r_inner: f64,
    #[serde(default = "default_r_out")]
    pub r_outer: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadialVortexSpec {
    #[serde(default = "default_center")]
    pub center: [f64; 2],
    pub alpha: f64,
    #[serde(default = "default_r_in")]
    pub r_inner: f64,
    #[serde(default = "default_r_out")]
    pub r_outer: f64,
    /// The regime choice (mollified p ≤ d vs raw p > d) belongs to the
    /// experimenter, so the declared exponent is explicit.
    pub declared_p: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampledSpec {
    pub seed: u64,
    pub n_x: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridFileSpec {
    pub path: String,
    pub declared_p: f64,
}

fn default_center() -> [f64; 2] {
    [0.5, 0.5]
}
fn default_r_in() -> f64 {
    0.3
}
fn default_r_out() -> f64 {
    0.45
}

/// Builds a catalog field with correct metadata.
pub fn catalog_field(spec: &FieldSpec) -> Result<VelocityField> {
    match spec {
        FieldSpec::Constant(s) => {
            if s.velocity.is_empty() || s.velocity.len() > MAX_DIM {
                return Err(Error::invalid("constant field dimension out of range"));
            }
            if s.velocity.iter().any(|c| !c.is_finite()) {
                return Err(Error::invalid("constant field velocity must be finite"));
            }
            let a = AnalyticField::Constant {
                velocity: s.velocity.clone(),
            };
            let sup = a.sup_norm();
            Ok(VelocityField::new(
                FieldKind::Analytic(a),
                FieldMeta {
                    dim: s.velocity.len(),
                    integrability: f64::INFINITY,
                    sup_norm: sup,
                    div_minus_bound: 0.0,
                    divergence_free: true,
                    rough: false,
                    t_max: f64::INFINITY,
                },
            ))
        }
        FieldSpec::ShearSine(_) => Ok(VelocityField::new(
            FieldKind::Analytic(AnalyticField::ShearSine),
            FieldMeta {
                dim: 2,
                integrability: f64::INFINITY,
                sup_norm: 1.0,
                div_minus_bound: 0.0,
                divergence_free: true,
                rough: false,
                t_max: f64::INFINITY,
            },
        )),
        FieldSpec::RigidRotationPatch(s) => {
            check_radii(s.r_inner, s.r_outer)?;
            if !s.omega.is_finite() {
                return Err(Error::invalid("omega must be finite"));
            }
            let a = AnalyticField::RigidRotationPatch {
                center: s.center,
                omega: s.omega,
                cutoff: RadialCutoff {
                    r_in: s.r_inner,
                    r_out: s.r_outer,
                },
            };
            let sup = a.sup_norm();
            Ok(VelocityField::new(
                FieldKind::Analytic(a),
                FieldMeta {
                    dim: 2,
                    integrability: f64::INFINITY,
                    sup_norm: sup,
                    div_minus_bound: 0.0,
                    divergence_free: true,
                    rough: false,
                    t_max: f64::INFINITY,
                },
            ))
        }
        FieldSpec::RadialVortex(s) => {
            check_radii(s.r_inner, s.r_outer)?;
            if !(s.alpha > 1.0 && s.alpha < 2.0) {
                return Err(Error::invalid(format!(
                    "vortex exponent must lie in (1,2), got {}",
                    s.alpha
                )));
            }
            if !(s.declared_p > 1.0) {
                return Err(Error::invalid("declared p must exceed 1"));
            }
            let a = AnalyticField::RadialVortex {
                center: s.center,
                alpha: s.alpha,
                cutoff: RadialCutoff {
                    r_in: s.r_inner,
                    r_out: s.r_outer,
                },
            };
            let sup = a.sup_norm();
            Ok(VelocityField::new(
                FieldKind::Analytic(a),
                FieldMeta {
                    dim: 2,
                    integrability: s.declared_p,
                    sup_norm: sup,
                    div_minus_bound: 0.0,
                    divergence_free: true,
                    rough: true,
                    t_max: f64::INFINITY,
                },
            ))
        }
        FieldSpec::SampledRandomDivfree(s) => sampled_random_divfree(s.seed, s.n_x),
        FieldSpec::GridFile(s) => {
            if !(s.declared_p > 1.0) {
                return Err(Error::invalid("declared p must exceed 1"));
            }
            let grid = GridField::read_file(&s.path)?;
            Ok(grid_velocity_field(grid, s.declared_p))
        }
    }
}

fn check_radii(r_in: f64, r_out: f64) -> Result<()> {
    if !(r_in > 0.0 && r_in < r_out && r_out < 0.5) {
        return Err(Error::invalid(format!(
            "need 0 < r_inner < r_outer < 1/2, got ({r_in}, {r_out})"
        )));
    }
    Ok(())
}

/// Wraps a sample grid in field metadata: the interpolant is Lipschitz but
/// only approximately divergence-free, so the flag is false and the
/// divergence bound is measured by finite differences.
pub fn grid_velocity_field(grid: GridField, declared_p: f64) -> VelocityField {
    let sup = grid.sup_norm();
    let t_max = grid.t_max();
    let dim = grid.dim();
    let div_bound = measure_div_minus(&grid);
    VelocityField::new(
        FieldKind::Grid(grid),
        FieldMeta {
            dim,
            integrability: declared_p,
            sup_norm: sup,
            div_minus_bound: div_bound,
            divergence_free: false,
            rough: false,
            t_max,
        },
    )
}

/// Max over probe points of (div u)⁻ by central differences, inflated to an
/// honest documented bound.
fn measure_div_minus(grid: &GridField) -> f64 {
    let d = grid.dim();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut plus = [0.0f64; MAX_DIM];
    let mut minus = [0.0f64; MAX_DIM];
    let mut x = [0.0f64; MAX_DIM];
    for i in 0..1000u64 {
        crate::qmc::halton_point(i, &mut x[..d]);
        let mut div = 0.0;
        for k in 0..d {
            let mut xp = x;
            xp[k] = crate::torus::wrap_unit(xp[k] + h);
            let mut xm = x;
            xm[k] = crate::torus::wrap_unit(xm[k] - h);
            grid.eval_raw(0.0, &xp[..d], &mut plus[..d]);
            grid.eval_raw(0.0, &xm[..d], &mut minus[..d]);
            div += (plus[k] - minus[k]) / (2.0 * h);
        }
        worst = worst.max(-div);
    }
    worst * 1.5 + 1e-6
}

/// Random exactly-divergence-free stream function sampled onto an n_x² grid
/// (d = 2): ψ = Σ a_k sin(2π k·x + φ_k)/|k|², u = ∇⊥ψ at the nodes.
/// Bitwise reproducible for a given seed.
fn sampled_random_divfree(seed: u64, n_x: usize) -> Result<VelocityField> {
    if n_x < 4 {
        return Err(Error::invalid("sampled field needs n_x ≥ 4"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut modes: Vec<([f64; 2], f64, f64)> = Vec::new();
    while modes.len() < 8 {
        let kx = rng.gen_range(-3i32..=3);
        let ky = rng.gen_range(-3i32..=3);
        if kx == 0 && ky == 0 {
            continue;
        }
        let k2 = (kx * kx + ky * ky) as f64;
        let amp = rng.gen_range(-1.0..1.0) / k2;
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        modes.push(([kx as f64, ky as f64], amp, phase));
    }
    let tau = std::f64::consts::TAU;
    let grad_psi = |x: f64, y: f64| -> [f64; 2] {
        let mut g = [0.0; 2];
        for (k, amp, phase) in &modes {
            let c = (tau * (k[0] * x + k[1] * y) + phase).cos() * amp * tau;
            g[0] += c * k[0];
            g[1] += c * k[1];
        }
        g
    };
    let mut data = Vec::with_capacity(n_x * n_x * 2);
    for i in 0..n_x {
        for j in 0..n_x {
            let x = i as f64 / n_x as f64;
            let y = j as f64 / n_x as f64;
            let g = grad_psi(x, y);
            data.push(-g[1]);
            data.push(g[0]);
        }
    }
    // Normalize the peak node speed to 1/2 so instances are comparable
    // across seeds.
    let max_norm = data
        .chunks_exact(2)
        .map(|v| (v[0] * v[0] + v[1] * v[1]).sqrt())
        .fold(0.0f64, f64::max);
    if max_norm > 0.0 {
        let s = 0.5 / max_norm;
        data.iter_mut().for_each(|v| *v *= s);
    }
    let grid = GridField::from_samples(vec![n_x, n_x], 1, f64::INFINITY, data)?;
    Ok(grid_velocity_field(grid, 2.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::torus::TorusPoint;

    fn pt(coords: &[f64]) -> TorusPoint {
        TorusPoint::new(coords.to_vec()).unwrap()
    }

    fn constant(v: &[f64]) -> VelocityField {
        catalog_field(&FieldSpec::Constant(ConstantSpec {
            velocity: v.to_vec(),
        }))
        .unwrap()
    }

    fn shear() -> VelocityField {
        catalog_field(&FieldSpec::ShearSine(ShearSineSpec {})).unwrap()
    }

    fn vortex(alpha: f64, declared_p: f64) -> VelocityField {
        catalog_field(&FieldSpec::RadialVortex(RadialVortexSpec {
            center: [0.5, 0.5],
            alpha,
            r_inner: 0.3,
            r_outer: 0.45,
            declared_p,
        }))
        .unwrap()
    }

    fn patch(omega: f64) -> VelocityField {
        catalog_field(&FieldSpec::RigidRotationPatch(RotationPatchSpec {
            center: [0.5, 0.5],
            omega,
            r_inner: 0.3,
            r_outer: 0.45,
        }))
        .unwrap()
    }

    fn bump(d: usize) -> MollifierKernel {
        MollifierKernel::new(MollifierProfile::Bump, d).unwrap()
    }

    #[test]
    fn catalog_constant_metadata_and_eval() {
        let f = constant(&[0.3, 0.0]);
        let m = f.meta();
        assert!(m.divergence_free);
        assert!(!m.rough);
        assert!((m.sup_norm - 0.3).abs() < 1e-15);
        assert_eq!(m.div_minus_bound, 0.0);
        let v = f.eval(17.0, &pt(&[0.9, 0.42])).unwrap();
        assert_eq!(v, vec![0.3, 0.0]);
    }

    #[test]
    fn catalog_shear_eval_closed_form() {
        let f = shear();
        let v = f.eval(0.0, &pt(&[0.1, 0.25])).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-15);
        assert_eq!(v[1], 0.0);
    }

    #[test]
    fn catalog_vortex_center_and_far_field() {
        let f = vortex(1.5, 3.0);
        assert_eq!(f.eval(0.0, &pt(&[0.5, 0.5])).unwrap(), vec![0.0, 0.0]);
        assert_eq!(f.eval(0.0, &pt(&[0.98, 0.5])).unwrap(), vec![0.0, 0.0]);
        assert!(f.meta().rough);
        assert_eq!(f.meta().integrability, 3.0);
    }

    #[test]
    fn catalog_patch_speed_at_half_inner_radius() {
        let omega = 1.7;
        let f = patch(omega);
        let v = f.eval(0.0, &pt(&[0.5 + 0.15, 0.5])).unwrap();
        let speed = (v[0] * v[0] + v[1] * v[1]).sqrt();
        assert!((speed - omega * 0.15).abs() < 1e-12);
    }

    #[test]
    fn catalog_rejects_bad_parameters() {
        assert!(catalog_field(&FieldSpec::Constant(ConstantSpec { velocity: vec![] })).is_err());
        assert!(catalog_field(&FieldSpec::RadialVortex(RadialVortexSpec {
            center: [0.5, 0.5],
            alpha: 2.5,
            r_inner: 0.3,
            r_outer: 0.45,
            declared_p: 3.0,
        }))
        .is_err());
        assert!(catalog_field(&FieldSpec::RigidRotationPatch(RotationPatchSpec {
            center: [0.5, 0.5],
            omega: 1.0,
            r_inner: 0.4,
            r_outer: 0.3,
        }))
        .is_err());
    }

    #[test]
    fn eval_validates_time_and_dimension() {
        let grid = GridField::from_samples(vec![2, 2], 2, 1.0, vec![0.0; 16]).unwrap();
        let f = grid_velocity_field(grid, 2.0);
        assert!(f.eval(1.5, &pt(&[0.1, 0.1])).is_err());
        assert!(f.eval(-0.1, &pt(&[0.1, 0.1])).is_err());
        assert!(f.eval(f64::NAN, &pt(&[0.1, 0.1])).is_err());
        assert!(f.eval(0.5, &pt(&[0.1])).is_err());
        assert!(f.eval(1.0, &pt(&[0.1, 0.1])).is_ok());
        // Autonomous entries accept any finite nonnegative time.
        assert!(shear().eval(1.0e9, &pt(&[0.1, 0.1])).is_ok());
    }

    #[test]
    fn mollify_preserves_constants() {
        let f = constant(&[0.3, -0.2]);
        for profile in [MollifierProfile::Bump, MollifierProfile::TruncatedGaussian] {
            let kernel = MollifierKernel::new(profile, 2).unwrap();
            let fm = mollify(&f, 0.2, kernel, 12).unwrap();
            let mut x = [0.0f64; 2];
            for i in 0..20u64 {
                crate::qmc::halton_point(i, &mut x);
                let v = fm.eval(0.0, &pt(&x)).unwrap();
                assert!((v[0] - 0.3).abs() <= 1e-10 && (v[1] + 0.2).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn mollify_is_identity_on_affine_sawtooth_away_from_kink() {
        // First component is the periodic sawtooth x₁ − 1/2 sampled on a
        // 64-point axis; the multilinear interpolant is exactly affine on
        // [0, 63/64], so mollification must reproduce it wherever the
        // shifted kernel support stays inside that range.
        let n = 64usize;
        let mut data = Vec::with_capacity(n * 2 * 2);
        for i in 0..n {
            for _j in 0..2 {
                data.push(i as f64 / n as f64 - 0.5);
                data.push(0.0);
            }
        }
        let grid = GridField::from_samples(vec![n, 2], 1, f64::INFINITY, data).unwrap();
        let f = grid_velocity_field(grid, 2.0);
        let delta = 0.1;
        let fm = mollify(&f, delta, bump(2), 16).unwrap();
        for &x1 in &[0.15, 0.3, 0.5, 0.62, 0.85] {
            for &x2 in &[0.1, 0.77] {
                let v = fm.eval(0.0, &pt(&[x1, x2])).unwrap();
                assert!(
                    (v[0] - (x1 - 0.5)).abs() <= 1e-12,
                    "u_δ({x1}) = {} vs {}",
                    v[0],
                    x1 - 0.5
                );
                assert!(v[1].abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn mollify_error_on_vortex_scales_linearly_in_delta() {
        // Frozen from an independent fine-quadrature computation of
        // max_{64² grid} |u_δ − u| for the α = 1.5 vortex: halving δ from
        // 0.2 to 0.1 scales the sampled error by ≈ 0.559.
        let f = vortex(1.5, 3.0);
        let sampled_max = |delta: f64| -> f64 {
            let fm = mollify(&f, delta, bump(2), 32).unwrap();
            let mut worst = 0.0f64;
            let mut um = [0.0f64; 2];
            let mut ub = [0.0f64; 2];
            for i in 0..64 {
                for j in 0..64 {
                    let x = [i as f64 / 64.0, j as f64 / 64.0];
                    fm.eval_raw(0.0, &x, &mut um);
                    f.eval_raw(0.0, &x, &mut ub);
                    let e = ((um[0] - ub[0]).powi(2) + (um[1] - ub[1]).powi(2)).sqrt();
                    worst = worst.max(e);
                }
            }
            worst
        };
        let coarse = sampled_max(0.2);
        let fine = sampled_max(0.1);
        assert!((coarse - 1.850973).abs() / 1.850973 < 1e-3, "coarse={coarse}");
        assert!((fine - 1.034265).abs() / 1.034265 < 1e-3, "fine={fine}");
        let ratio = fine / coarse;
        assert!((0.4..=0.6).contains(&ratio), "ratio={ratio}");
    }

    #[test]
    fn mollify_respects_sup_norm_bound() {
        for f in [vortex(1.5, 3.0), shear()] {
            let sup = f.meta().sup_norm;
            let fm = mollify(&f, 0.1, bump(2), 16).unwrap();
            assert_eq!(fm.meta().sup_norm, sup);
            let mut v = [0.0f64; 2];
            for i in 0..64 {
                for j in 0..64 {
                    fm.eval_raw(0.0, &[i as f64 / 64.0, j as f64 / 64.0], &mut v);
                    let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
                    assert!(n <= sup + 1e-8, "norm {n} exceeds bound {sup}");
                }
            }
        }
    }

    #[test]
    fn mollify_rejects_bad_arguments() {
        let f = shear();
        assert!(mollify(&f, 0.3, bump(2), 16).is_err());
        assert!(mollify(&f, 0.0, bump(2), 16).is_err());
        assert!(mollify(&f, 0.1, bump(2), 4).is_err());
        assert!(mollify(&f, 0.1, bump(1), 16).is_err());
    }

    #[test]
    fn divergence_free_fields_have_small_fd_divergence() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let h = 1e-5;
        let fields: Vec<(VelocityField, bool)> = vec![
            (constant(&[0.3, 0.1]), false),
            (shear(), false),
            (patch(1.3), false),
            (vortex(1.5, 3.0), true),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for (f, is_vortex) in &fields {
            assert!(f.meta().divergence_free);
            let mut plus = [0.0f64; 2];
            let mut minus = [0.0f64; 2];
            for _ in 0..1000 {
                let x = [rng.gen::<f64>(), rng.gen::<f64>()];
                let r = crate::torus::periodic_distance_slice(&x, &[0.5, 0.5]);
                if *is_vortex && r < 1e-3 {
                    // The FD step no longer resolves the r^{α−1} profile.
                    continue;
                }
                let mut div = 0.0;
                for k in 0..2 {
                    let mut xp = x;
                    xp[k] = crate::torus::wrap_unit(xp[k] + h);
                    let mut xm = x;
                    xm[k] = crate::torus::wrap_unit(xm[k] - h);
                    f.eval_raw(0.0, &xp, &mut plus);
                    f.eval_raw(0.0, &xm, &mut minus);
                    div += (plus[k] - minus[k]) / (2.0 * h);
                }
                let near_feature = *is_vortex && (r < 0.05 || (0.28..0.47).contains(&r));
                let tol = if near_feature { 1e-2 } else { 1e-4 };
                assert!(div.abs() <= tol, "div={div} at {x:?} (r={r})");
            }
        }
    }

    #[test]
    fn time_average_of_autonomous_field_is_pointwise_eval() {
        let f = shear();
        let x = pt(&[0.1, 0.25]);
        let avg = time_averaged_velocity(&f, 0.3, 0.9, &x, 7).unwrap();
        let direct = f.eval(0.3, &x).unwrap();
        assert_eq!(avg, direct);
    }

    #[test]
    fn time_average_exact_for_affine_time_dependence() {
        let f = time_poly_field(vec![0.0, 1.0], 1.0);
        let avg = time_averaged_velocity(&f, 0.0, 1.0, &pt(&[0.2, 0.9]), 1).unwrap();
        assert_eq!(avg, vec![0.5, 0.0]);
    }

    #[test]
    fn time_average_quadratic_midpoint_value() {
        // Composite midpoint with 4 subintervals on t² over [0,1]:
        // (1 + 9 + 25 + 49)/256 = 0.328125, vs the exact 1/3.
        let f = time_poly_field(vec![0.0, 0.0, 1.0], 1.0);
        let avg = time_averaged_velocity(&f, 0.0, 1.0, &pt(&[0.2, 0.9]), 4).unwrap();
        assert_eq!(avg, vec![0.328125, 0.0]);
    }

    #[test]
    fn time_average_second_order_in_subinterval_count() {
        let f = time_poly_field(vec![0.0, 0.0, 1.0], 1.0);
        let x = pt(&[0.0, 0.0]);
        let a = |n: usize| time_averaged_velocity(&f, 0.0, 1.0, &x, n).unwrap()[0];
        let d1 = (a(2) - a(4)).abs();
        let d2 = (a(4) - a(8)).abs();
        let d3 = (a(8) - a(16)).abs();
        let order_a = (d1 / d2).log2();
        let order_b = (d2 / d3).log2();
        assert!(order_a >= 1.8, "order {order_a}");
        assert!(order_b >= 1.8, "order {order_b}");
    }

    #[test]
    fn time_average_rejects_bad_windows() {
        let f = time_poly_field(vec![1.0], 1.0);
        let x = pt(&[0.0, 0.0]);
        assert!(time_averaged_velocity(&f, 0.5, 0.5, &x, 4).is_err());
        assert!(time_averaged_velocity(&f, 0.9, 0.1, &x, 4).is_err());
        assert!(time_averaged_velocity(&f, 0.0, 1.0, &x, 0).is_err());
        assert!(time_averaged_velocity(&f, 0.5, 1.5, &x, 4).is_err());
    }

    #[test]
    fn vortex_gradient_integrability_by_dyadic_annuli() {
        // For α = 1.5 the closed-form gradient magnitude inside the cutoff
        // plateau is |Du|_F = α√((α−1)²+1)·r^{α−2}, so ∫|Du|^q dx converges
        // iff (2−α)q < 2: q = 3 yields geometrically decaying annulus
        // contributions, q = 5 geometrically growing ones.
        let alpha = 1.5;
        let f = vortex(alpha, 3.0);
        let c = alpha * ((alpha - 1.0) * (alpha - 1.0) + 1.0).sqrt();
        let fd_grad_frob = |x: &[f64; 2]| -> f64 {
            let r = crate::torus::periodic_distance_slice(x, &[0.5, 0.5]);
            let h = (r * 1e-5).max(1e-9);
            let mut frob2 = 0.0;
            let mut plus = [0.0f64; 2];
            let mut minus = [0.0f64; 2];
            for j in 0..2 {
                let mut xp = *x;
                xp[j] += h;
                let mut xm = *x;
                xm[j] -= h;
                f.eval_raw(0.0, &xp, &mut plus);
                f.eval_raw(0.0, &xm, &mut minus);
                for i in 0..2 {
                    let g = (plus[i] - minus[i]) / (2.0 * h);
                    frob2 += g * g;
                }
            }
            frob2.sqrt()
        };
        // Spot-check the closed form away from the annulus and the center.
        for &r in &[0.01f64, 0.05, 0.2] {
            let x = [0.5 + r, 0.5];
            let exact = c * r.powf(alpha - 2.0);
            let got = fd_grad_frob(&x);
            assert!((got - exact).abs() / exact < 1e-2, "r={r}: {got} vs {exact}");
        }
        // Annulus integrals over r ∈ [2^{−k−1}, 2^{−k}] by polar midpoint
        // quadrature of the FD gradient, cross-checked against the closed
        // form, then tested for geometric decay/growth.
        let annulus_integral = |k: u32, q: i32| -> f64 {
            let r_hi = 0.5f64.powi(k as i32);
            let r_lo = 0.5 * r_hi;
            let n_r = 16;
            let n_th = 64;
            let dr = (r_hi - r_lo) / n_r as f64;
            let dth = std::f64::consts::TAU / n_th as f64;
            let mut total = 0.0;
            for ir in 0..n_r {
                let r = r_lo + (ir as f64 + 0.5) * dr;
                for ith in 0..n_th {
                    let th = (ith as f64 + 0.5) * dth;
                    let x = [0.5 + r * th.cos(), 0.5 + r * th.sin()];
                    total += fd_grad_frob(&x).powi(q) * r * dr * dth;
                }
            }
            total
        };
        let exact_annulus = |k: u32, q: f64| -> f64 {
            let r_hi = 0.5f64.powi(k as i32);
            let r_lo = 0.5 * r_hi;
            let e = (alpha - 2.0) * q + 2.0;
            std::f64::consts::TAU * c.powf(q) * (r_hi.powf(e) - r_lo.powf(e)) / e
        };
        for q in [3i32, 5] {
            let mut prev = None;
            for k in 4..=9u32 {
                let numeric = annulus_integral(k, q);
                let exact = exact_annulus(k, q as f64);
                assert!(
                    (numeric - exact).abs() / exact < 2e-2,
                    "k={k} q={q}: {numeric} vs {exact}"
                );
                if let Some(p) = prev {
                    let ratio: f64 = numeric / p;
                    if q == 3 {
                        assert!((0.6..0.8).contains(&ratio), "q=3 ratio {ratio}");
                    } else {
                        assert!((1.25..1.6).contains(&ratio), "q=5 ratio {ratio}");
                    }
                }
                prev = Some(numeric);
            }
        }
    }

    #[test]
    fn sampled_field_is_reproducible_and_flagged() {
        let a = catalog_field(&FieldSpec::SampledRandomDivfree(SampledSpec {
            seed: 7,
            n_x: 32,
        }))
        .unwrap();
        let b = catalog_field(&FieldSpec::SampledRandomDivfree(SampledSpec {
            seed: 7,
            n_x: 32,
        }))
        .unwrap();
        let c = catalog_field(&FieldSpec::SampledRandomDivfree(SampledSpec {
            seed: 8,
            n_x: 32,
        }))
        .unwrap();
        let mut va = [0.0f64; 2];
        let mut vb = [0.0f64; 2];
        let mut vc = [0.0f64; 2];
        let mut differs = false;
        for i in 0..50u64 {
            let mut x = [0.0f64; 2];
            crate::qmc::halton_point(i, &mut x);
            a.eval_raw(0.0, &x, &mut va);
            b.eval_raw(0.0, &x, &mut vb);
            c.eval_raw(0.0, &x, &mut vc);
            assert_eq!(va, vb);
            if va != vc {
                differs = true;
            }
        }
        assert!(differs);
        assert!(!a.meta().divergence_free);
        assert!(a.meta().div_minus_bound > 0.0);
        assert!((a.meta().sup_norm - 0.5).abs() < 1e-12);
        assert!(catalog_field(&FieldSpec::SampledRandomDivfree(SampledSpec {
            seed: 1,
            n_x: 2,
        }))
        .is_err());
    }

    #[test]
    fn field_spec_parsing_is_fail_closed() {
        let ok: FieldSpec = serde_json::from_str(r#"{"name":"shear_sine"}"#).unwrap();
        assert!(matches!(ok, FieldSpec::ShearSine(_)));
        let unknown_name = serde_json::from_str::<FieldSpec>(r#"{"name":"spiral"}"#);
        assert!(unknown_name.is_err());
        let unknown_key =
            serde_json::from_str::<FieldSpec>(r#"{"name":"shear_sine","bogus":1}"#);
        assert!(unknown_key.is_err(), "unknown keys must be rejected");
        let vortex_spec: FieldSpec = serde_json::from_str(
            r#"{"name":"radial_vortex","alpha":1.5,"declared_p":3.0}"#,
        )
        .unwrap();
        let round = serde_json::to_string(&vortex_spec).unwrap();
        let back: FieldSpec = serde_json::from_str(&round).unwrap();
        assert!(matches!(back, FieldSpec::RadialVortex(ref s) if s.alpha == 1.5));
    }
}
