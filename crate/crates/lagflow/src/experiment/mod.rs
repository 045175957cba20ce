//! Experiment configuration and dyadic sweeps.
//!
//! A JSON config names a velocity field, a mesh family, an initial density,
//! a scheme, a metric, and two independent dyadic level lists for Δt and Δx
//! (the scheme needs no step-size coupling, so the grid is their full
//! product). [`run_sweep`] executes every (Δt, Δx) level, measures errors
//! against a shared reference, and writes `results.csv` plus `summary.json`
//! into the configured output directory; a failed level is recorded and the
//! remaining levels continue. [`fit_rates`] and [`emit_plotdata`] consume
//! the results for rate analysis and plotting.

mod fit;

pub use fit::{emit_plotdata, fit_rates, FittedModel, RateFit, RateModel};

use crate::error::{Error, Result};
use crate::fields::{catalog_field, FieldSpec, MollifierProfile, VelocityField};
use crate::flow::{DeltaRule, FlowConfig};
use crate::mesh::{build_mesh, Density, Mesh, MeshKind, UniformDensity};
use crate::solver::{
    cellwise_density, error_curve, monte_carlo, reference_solution, run_diffuse, run_singular,
    Aggregate, RepresentativeMode, SinusoidalDensity, TruncatedSingularDensity,
};
use crate::transport::{DiscreteMeasure, GroundMetric};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Mesh family for a sweep; the per-level resolution N = 2^(dx exponent)
/// comes from the sweep grid, not from here.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshSpec {
    pub kind: MeshKind,
    #[serde(default)]
    pub jitter: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Initial-density catalog.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Rho0Spec {
    Uniform(UniformSpec),
    Sinusoidal(SinusoidalSpec),
    TruncatedSingular(TruncatedSingularSpec),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UniformSpec {}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinusoidalSpec {
    pub amplitude: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncatedSingularSpec {
    pub center: Vec<f64>,
    pub gamma: f64,
    /// Truncation level K; always explicit, never inferred.
    pub level: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeSpec {
    Singular,
    Diffuse,
}

/// Ground metric for error measurement. The logarithmic metric's scale h
/// either tracks the level (max{Δt, Δx}) or is fixed explicitly.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricSpec {
    W1(W1Spec),
    Log(LogMetricSpec),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct W1Spec {}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogMetricSpec {
    pub alpha: f64,
    #[serde(default)]
    pub h_rule: HRule,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HRule {
    #[default]
    MaxDtDx,
    Explicit(f64),
}

/// Mollification-width rule for the sweep. `Auto` picks √Δt when the
/// declared integrability satisfies p ≤ d and no mollification otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaRuleSpec {
    #[default]
    Auto,
    SqrtDt,
    None,
    Explicit(f64),
}

/// Where the reference measures come from. Push-forward clouds need a
/// Lipschitz field; rough fields must configure self-convergence (the same
/// scheme at a finer, frozen level).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReferenceSpec {
    PushForward(PushForwardSpec),
    SelfConvergence(SelfConvergenceSpec),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PushForwardSpec {
    #[serde(default = "default_ref_particles")]
    pub n_particles: usize,
    /// Reference step exponent; defaults to two levels finer than the
    /// finest Δt in the sweep.
    #[serde(default)]
    pub dt_exponent: Option<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelfConvergenceSpec {
    pub dt_exponent: u32,
    pub dx_exponent: u32,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ReferenceSpec {
    fn default() -> Self {
        ReferenceSpec::PushForward(PushForwardSpec {
            n_particles: default_ref_particles(),
            dt_exponent: None,
        })
    }
}

fn default_ref_particles() -> usize {
    4096
}
fn default_quad_per_cell() -> usize {
    64
}
fn default_snapshot_nodes() -> usize {
    4
}
fn default_n_quad_time() -> usize {
    4
}
fn default_det_probes() -> usize {
    8
}
fn default_rep_mode() -> RepresentativeMode {
    RepresentativeMode::Uniform
}

/// A fully described sweep. Unknown keys anywhere in the JSON are rejected,
/// as are duplicate keys; see [`load_config`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub field: FieldSpec,
    pub mesh: MeshSpec,
    pub rho0: Rho0Spec,
    pub scheme: SchemeSpec,
    pub metric: MetricSpec,
    /// Δt = 2^(−e) for each exponent e; swept against every Δx level.
    pub dt_exponents: Vec<u32>,
    /// Mesh resolutions N = 2^e, i.e. nominal cell width Δx = 2^(−e).
    pub dx_exponents: Vec<u32>,
    #[serde(default)]
    pub delta_rule: DeltaRuleSpec,
    pub horizon: f64,
    pub sample_times: Vec<f64>,
    pub n_reps: usize,
    pub base_seed: u64,
    pub output_dir: String,
    #[serde(default)]
    pub reference: ReferenceSpec,
    #[serde(default = "default_rep_mode")]
    pub rep_mode: RepresentativeMode,
    #[serde(default = "default_quad_per_cell")]
    pub quad_per_cell: usize,
    #[serde(default = "default_snapshot_nodes")]
    pub snapshot_nodes_per_cell: usize,
    #[serde(default = "default_n_quad_time")]
    pub n_quad_time: usize,
    #[serde(default = "default_det_probes")]
    pub n_det_probes: usize,
}

fn config_error(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Scans raw JSON for duplicate object keys, which serde would silently
/// collapse (last occurrence wins) — a config with two `n_reps` keys is a
/// mistake, not a preference.
fn scan_duplicate_keys(text: &str) -> Result<()> {
    struct ObjScope {
        keys: HashSet<String>,
        expect_key: bool,
    }
    enum Scope {
        Obj(ObjScope),
        Arr,
    }
    let mut stack: Vec<Scope> = Vec::new();
    let mut it = text.chars();
    while let Some(c) = it.next() {
        match c {
            '"' => {
                let mut s = String::new();
                loop {
                    match it.next() {
                        Option::None => {
                            return Err(config_error("unterminated string in config"))
                        }
                        Some('\\') => match it.next() {
                            Option::None => {
                                return Err(config_error("unterminated string in config"))
                            }
                            Some(e) => {
                                s.push('\\');
                                s.push(e);
                            }
                        },
                        Some('"') => break,
                        Some(other) => s.push(other),
                    }
                }
                if let Some(Scope::Obj(o)) = stack.last_mut() {
                    if o.expect_key && !o.keys.insert(s.clone()) {
                        return Err(config_error(format!("duplicate key {s:?} in config")));
                    }
                }
            }
            '{' => stack.push(Scope::Obj(ObjScope {
                keys: HashSet::new(),
                expect_key: true,
            })),
            '[' => stack.push(Scope::Arr),
            '}' | ']' => {
                stack.pop();
            }
            ':' => {
                if let Some(Scope::Obj(o)) = stack.last_mut() {
                    o.expect_key = false;
                }
            }
            ',' => {
                if let Some(Scope::Obj(o)) = stack.last_mut() {
                    o.expect_key = true;
                }
            }
            _ => {}
        }
    }
    Ok(())
}

/// Hash of the canonicalized config: the JSON is reparsed into a value whose
/// object keys sort deterministically, so semantically identical configs
/// (key order permuted) hash identically.
pub fn config_hash(text: &str) -> Result<String> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| config_error(format!("invalid JSON: {e}")))?;
    let canonical = serde_json::to_string(&value).map_err(|e| config_error(e.to_string()))?;
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    Ok(format!("{:x}", hasher.finalize()))
}

/// Loads and fully validates a config, returning it with its canonical
/// hash. Fails closed: unknown keys, duplicate keys, and out-of-range
/// values are all rejected with a message naming the offender.
pub fn load_config(path: &Path) -> Result<(ExperimentConfig, String)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
    let hash = config_hash(&text)?;
    scan_duplicate_keys(&text)?;
    let config: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| config_error(e.to_string()))?;
    config.validate()?;
    Ok((config, hash))
}

impl ExperimentConfig {
    /// Cross-field validation beyond what serde's schema gives us.
    pub fn validate(&self) -> Result<()> {
        let field = catalog_field(&self.field)
            .map_err(|e| config_error(format!("field: {e}")))?;
        let d = field.dim();
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(config_error("horizon must be positive and finite"));
        }
        if self.sample_times.is_empty() {
            return Err(config_error("sample_times must not be empty"));
        }
        for &t in &self.sample_times {
            if !t.is_finite() || t < 0.0 || t > self.horizon {
                return Err(config_error(format!(
                    "sample time {t} outside [0, {}]",
                    self.horizon
                )));
            }
        }
        if self.dt_exponents.is_empty() || self.dx_exponents.is_empty() {
            return Err(config_error("dt_exponents and dx_exponents must not be empty"));
        }
        for &e in &self.dt_exponents {
            if e > 30 {
                return Err(config_error(format!("dt exponent {e} too fine (max 30)")));
            }
            let steps = self.horizon * (1u64 << e) as f64;
            if (steps - steps.round()).abs() > 1e-9 * steps.max(1.0) {
                return Err(config_error(format!(
                    "horizon {} is not an integer number of steps of 2^-{e}",
                    self.horizon
                )));
            }
        }
        for &e in &self.dx_exponents {
            if !(1..=10).contains(&e) {
                return Err(config_error(format!(
                    "dx exponent {e} out of range 1..=10 (resolution 2..=1024)"
                )));
            }
        }
        if let DeltaRuleSpec::Explicit(delta) = self.delta_rule {
            if !(delta > 0.0 && delta <= 0.25) {
                return Err(config_error("explicit delta must lie in (0, 1/4]"));
            }
        }
        match &self.metric {
            MetricSpec::W1(_) => {}
            MetricSpec::Log(log) => {
                if !(0.0..=1.0).contains(&log.alpha) {
                    return Err(config_error(format!(
                        "metric alpha {} outside [0, 1]",
                        log.alpha
                    )));
                }
                if let HRule::Explicit(h) = log.h_rule {
                    if !(h > 0.0 && h.is_finite()) {
                        return Err(config_error("explicit metric h must be positive"));
                    }
                }
            }
        }
        match &self.rho0 {
            Rho0Spec::Uniform(_) => {}
            Rho0Spec::Sinusoidal(s) => {
                if !(0.0..1.0).contains(&s.amplitude) {
                    return Err(config_error(format!(
                        "sinusoidal amplitude {} outside [0, 1)",
                        s.amplitude
                    )));
                }
            }
            Rho0Spec::TruncatedSingular(s) => {
                if s.center.len() != d {
                    return Err(config_error(format!(
                        "rho0 center has {} coordinates for a {d}-dimensional field",
                        s.center.len()
                    )));
                }
                if !(s.gamma > 0.0 && s.gamma < d as f64) {
                    return Err(config_error(format!(
                        "rho0 gamma {} outside (0, {d})",
                        s.gamma
                    )));
                }
                if !(s.level > 0.0 && s.level.is_finite()) {
                    return Err(config_error("rho0 truncation level must be positive"));
                }
            }
        }
        if self.n_reps < 1 {
            return Err(config_error("n_reps must be ≥ 1"));
        }
        if self.output_dir.is_empty() {
            return Err(config_error("output_dir must not be empty"));
        }
        if self.quad_per_cell < 32 {
            return Err(config_error("quad_per_cell must be ≥ 32"));
        }
        if self.snapshot_nodes_per_cell < 1 {
            return Err(config_error("snapshot_nodes_per_cell must be ≥ 1"));
        }
        if self.n_quad_time < 1 {
            return Err(config_error("n_quad_time must be ≥ 1"));
        }
        match &self.reference {
            ReferenceSpec::PushForward(p) => {
                if p.n_particles == 0 {
                    return Err(config_error("reference n_particles must be ≥ 1"));
                }
            }
            ReferenceSpec::SelfConvergence(s) => {
                if !(1..=10).contains(&s.dx_exponent) {
                    return Err(config_error("reference dx exponent out of range 1..=10"));
                }
                if s.dt_exponent > 30 {
                    return Err(config_error("reference dt exponent too fine (max 30)"));
                }
            }
        }
        Ok(())
    }

    fn build_density(&self, dim: usize) -> Result<Box<dyn Density>> {
        Ok(match &self.rho0 {
            Rho0Spec::Uniform(_) => Box::new(UniformDensity),
            Rho0Spec::Sinusoidal(s) => Box::new(SinusoidalDensity::new(s.amplitude)?),
            Rho0Spec::TruncatedSingular(s) => Box::new(TruncatedSingularDensity::new(
                dim, &s.center, s.gamma, s.level,
            )?),
        })
    }

    fn resolve_delta_rule(&self, field: &VelocityField, dt: f64) -> DeltaRule {
        match self.delta_rule {
            DeltaRuleSpec::Auto => {
                FlowConfig::default_for(self.horizon, dt, field.meta().integrability, field.dim())
                    .delta_rule
            }
            DeltaRuleSpec::SqrtDt => DeltaRule::SqrtDt,
            DeltaRuleSpec::None => DeltaRule::None,
            DeltaRuleSpec::Explicit(delta) => DeltaRule::Explicit(delta),
        }
    }

    fn flow_config(&self, field: &VelocityField, dt: f64) -> FlowConfig {
        let mut cfg = FlowConfig::new(self.horizon, dt, self.resolve_delta_rule(field, dt));
        cfg.n_quad_time = self.n_quad_time;
        cfg
    }

    fn ground_metric(&self, dt: f64, dx: f64) -> Result<GroundMetric> {
        Ok(match &self.metric {
            MetricSpec::W1(_) => GroundMetric::EuclideanTorus,
            MetricSpec::Log(log) => {
                let h = match log.h_rule {
                    HRule::MaxDtDx => dt.max(dx),
                    HRule::Explicit(h) => h,
                };
                GroundMetric::logarithmic(log.alpha, h)?
            }
        })
    }

    fn metric_name(&self) -> &'static str {
        match self.metric {
            MetricSpec::W1(_) => "w1",
            MetricSpec::Log(_) => "log",
        }
    }

    fn metric_alpha(&self) -> Option<f64> {
        match &self.metric {
            MetricSpec::W1(_) => Option::None,
            MetricSpec::Log(log) => Some(log.alpha),
        }
    }

    fn scheme_name(&self) -> &'static str {
        match self.scheme {
            SchemeSpec::Singular => "singular",
            SchemeSpec::Diffuse => "diffuse",
        }
    }
}

/// Outcome of one sweep level, recorded in `summary.json`.
#[derive(Debug, Clone, Serialize)]
pub struct LevelRecord {
    pub dt_exponent: u32,
    pub dx_exponent: u32,
    pub dt: f64,
    pub dx: f64,
    pub resolution: usize,
    pub delta: f64,
    /// Measured min_i |Q_i| / Δx^d of the level's mesh.
    pub mesh_min_volume_ratio: Option<f64>,
    /// Measured maximal cell diameter of the level's mesh.
    pub mesh_max_diameter: Option<f64>,
    pub runtime_ms: u128,
    /// "ok", or "failed: <error>".
    pub status: String,
}

#[derive(Debug, Serialize)]
struct SweepSummary<'a> {
    version: &'static str,
    config_hash: &'a str,
    scheme: &'static str,
    metric: &'a MetricSpec,
    base_seed: u64,
    n_reps: usize,
    sample_times: &'a [f64],
    mollifier_profile: MollifierProfile,
    reference: &'a ReferenceSpec,
    reference_atoms: usize,
    levels: &'a [LevelRecord],
}

/// Where a finished sweep put its artifacts.
#[derive(Debug, Clone)]
pub struct SweepReport {
    pub output_dir: PathBuf,
    pub results_path: PathBuf,
    pub summary_path: PathBuf,
    pub n_levels: usize,
    pub n_failed: usize,
}

struct ResultRow {
    scheme: &'static str,
    dt: f64,
    dx: f64,
    delta: f64,
    metric: &'static str,
    alpha: Option<f64>,
    h: f64,
    t: f64,
    mean_err: f64,
    var_err: f64,
    n_reps: usize,
    min_det: Option<f64>,
    runtime_ms: u128,
}

pub(crate) const RESULTS_HEADER: [&str; 13] = [
    "scheme",
    "dt",
    "dx",
    "delta",
    "metric",
    "alpha",
    "h",
    "t",
    "mean_err",
    "var_err",
    "n_reps",
    "min_det",
    "runtime_ms",
];

/// Executes the full (Δt, Δx) grid of a validated config and writes
/// `results.csv` and `summary.json` under its output directory. Levels run
/// concurrently (replications nest inside them on the same worker pool),
/// but rows and level records are assembled in grid order by this single
/// writer, so reruns reproduce the files byte for byte apart from runtimes.
/// A failing level is recorded in the summary while the other levels
/// continue; the report counts the failures.
pub fn run_sweep(config: &ExperimentConfig, config_hash: &str) -> Result<SweepReport> {
    let field = catalog_field(&config.field)?;
    let rho = config.build_density(field.dim())?;
    let reference = build_reference(config, &field, rho.as_ref())?;
    let reference_atoms = reference.first().map_or(0, |m| m.len());

    let out_dir = PathBuf::from(&config.output_dir);
    std::fs::create_dir_all(&out_dir)?;

    let grid: Vec<(u32, u32)> = config
        .dt_exponents
        .iter()
        .flat_map(|&dt_exp| config.dx_exponents.iter().map(move |&dx_exp| (dt_exp, dx_exp)))
        .collect();
    let outcomes: Vec<(LevelRecord, Vec<ResultRow>)> = grid
        .par_iter()
        .map(|&(dt_exp, dx_exp)| {
            let started = Instant::now();
            let dt = 0.5f64.powi(dt_exp as i32);
            let dx = 0.5f64.powi(dx_exp as i32);
            let mut record = LevelRecord {
                dt_exponent: dt_exp,
                dx_exponent: dx_exp,
                dt,
                dx,
                resolution: 1usize << dx_exp,
                delta: config
                    .flow_config(&field, dt)
                    .resolve_delta()
                    .unwrap_or(0.0),
                mesh_min_volume_ratio: Option::None,
                mesh_max_diameter: Option::None,
                runtime_ms: 0,
                status: "ok".to_string(),
            };
            let rows = match build_mesh_for(config, field.dim(), dx_exp) {
                Ok(mesh) => {
                    record.mesh_min_volume_ratio = Some(mesh.min_volume_ratio);
                    record.mesh_max_diameter = Some(
                        mesh.cells.iter().map(|c| c.diameter).fold(0.0f64, f64::max),
                    );
                    run_level(config, &field, rho.as_ref(), &reference, &mesh, dt, dx)
                }
                Err(e) => Err(e),
            };
            record.runtime_ms = started.elapsed().as_millis();
            match rows {
                Ok(mut rows) => {
                    for r in &mut rows {
                        r.runtime_ms = record.runtime_ms;
                    }
                    (record, rows)
                }
                Err(e) => {
                    record.status = format!("failed: {e}");
                    (record, Vec::new())
                }
            }
        })
        .collect();
    let mut rows: Vec<ResultRow> = Vec::new();
    let mut levels: Vec<LevelRecord> = Vec::with_capacity(outcomes.len());
    for (record, level_rows) in outcomes {
        rows.extend(level_rows);
        levels.push(record);
    }

    let results_path = out_dir.join("results.csv");
    write_results(&results_path, &rows)?;
    let summary = SweepSummary {
        version: crate::VERSION,
        config_hash,
        scheme: config.scheme_name(),
        metric: &config.metric,
        base_seed: config.base_seed,
        n_reps: config.n_reps,
        sample_times: &config.sample_times,
        mollifier_profile: MollifierProfile::Bump,
        reference: &config.reference,
        reference_atoms,
        levels: &levels,
    };
    let summary_path = out_dir.join("summary.json");
    std::fs::write(
        &summary_path,
        serde_json::to_string_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?,
    )?;
    let n_failed = levels.iter().filter(|l| l.status != "ok").count();
    Ok(SweepReport {
        output_dir: out_dir,
        results_path,
        summary_path,
        n_levels: levels.len(),
        n_failed,
    })
}

fn build_mesh_for(config: &ExperimentConfig, dim: usize, dx_exp: u32) -> Result<Mesh> {
    build_mesh(
        config.mesh.kind,
        dim,
        1usize << dx_exp,
        config.mesh.jitter,
        config.mesh.seed,
    )
}

/// The shared reference measures, one per sample time.
fn build_reference(
    config: &ExperimentConfig,
    field: &VelocityField,
    rho: &dyn Density,
) -> Result<Vec<DiscreteMeasure>> {
    match &config.reference {
        ReferenceSpec::PushForward(p) => {
            let tmax = config
                .sample_times
                .iter()
                .cloned()
                .fold(0.0f64, f64::max);
            let finest = config.dt_exponents.iter().copied().max().unwrap_or(0);
            let nominal = 0.5f64.powi(p.dt_exponent.unwrap_or(finest + 2) as i32);
            // Sample times may not align with a dyadic step, so the step is
            // shrunk to the nearest divisor of the flow horizon.
            let dt_ref = if tmax > 0.0 {
                tmax / (tmax / nominal).ceil().max(1.0)
            } else {
                nominal
            };
            reference_solution(field, rho, &config.sample_times, p.n_particles, dt_ref)
        }
        ReferenceSpec::SelfConvergence(s) => {
            let dt = 0.5f64.powi(s.dt_exponent as i32);
            let mesh = build_mesh_for(config, field.dim(), s.dx_exponent)?;
            let cfg = config.flow_config(field, dt);
            let run = match config.scheme {
                SchemeSpec::Singular => run_singular(
                    field,
                    &mesh,
                    rho,
                    &cfg,
                    s.seed,
                    &config.sample_times,
                    config.rep_mode,
                    config.quad_per_cell,
                    0,
                )?,
                SchemeSpec::Diffuse => {
                    let rho_bar = cellwise_density(&mesh, rho, config.quad_per_cell)?;
                    run_diffuse(
                        field,
                        &mesh,
                        &rho_bar,
                        &cfg,
                        &config.sample_times,
                        config.quad_per_cell,
                        config.snapshot_nodes_per_cell,
                    )?
                }
            };
            Ok(run.snapshots)
        }
    }
}

fn run_level(
    config: &ExperimentConfig,
    field: &VelocityField,
    rho: &dyn Density,
    reference: &[DiscreteMeasure],
    mesh: &Mesh,
    dt: f64,
    dx: f64,
) -> Result<Vec<ResultRow>> {
    let cfg = config.flow_config(field, dt);
    let metric = config.ground_metric(dt, dx)?;
    let delta = cfg.resolve_delta().unwrap_or(0.0);
    let h = dt.max(dx);
    let base = |t: f64, mean_err: f64, var_err: f64, n_reps: usize, min_det: Option<f64>| {
        ResultRow {
            scheme: config.scheme_name(),
            dt,
            dx,
            delta,
            metric: config.metric_name(),
            alpha: config.metric_alpha(),
            h,
            t,
            mean_err,
            var_err,
            n_reps,
            min_det,
            runtime_ms: 0,
        }
    };
    let rows = match config.scheme {
        SchemeSpec::Singular => {
            // One dedicated run carries the determinant probes (the Monte
            // Carlo replications skip them to stay lean).
            let diag_run = run_singular(
                field,
                mesh,
                rho,
                &cfg,
                config.base_seed,
                &config.sample_times,
                config.rep_mode,
                config.quad_per_cell,
                config.n_det_probes,
            )?;
            let min_det = diag_run.diagnostics.min_step_det;
            if config.n_reps >= 2 {
                let summary = monte_carlo(
                    field,
                    mesh,
                    rho,
                    &cfg,
                    &metric,
                    config.n_reps,
                    config.base_seed,
                    &config.sample_times,
                    Aggregate::PerRep,
                    reference,
                    config.rep_mode,
                    config.quad_per_cell,
                )?;
                summary
                    .per_time
                    .iter()
                    .map(|s| base(s.t, s.mean_error, s.sample_variance, config.n_reps, min_det))
                    .collect()
            } else {
                let curve = error_curve(&diag_run, reference, &metric)?;
                curve
                    .iter()
                    .map(|p| base(p.t, p.distance, 0.0, 1, min_det))
                    .collect()
            }
        }
        SchemeSpec::Diffuse => {
            let rho_bar = cellwise_density(mesh, rho, config.quad_per_cell)?;
            let run = run_diffuse(
                field,
                mesh,
                &rho_bar,
                &cfg,
                &config.sample_times,
                config.quad_per_cell,
                config.snapshot_nodes_per_cell,
            )?;
            let curve = error_curve(&run, reference, &metric)?;
            curve
                .iter()
                .map(|p| base(p.t, p.distance, 0.0, 1, Option::None))
                .collect()
        }
    };
    Ok(rows)
}

fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    w.write_record(RESULTS_HEADER)
        .map_err(crate::flow::csv_error)?;
    for r in rows {
        let rec = [
            r.scheme.to_string(),
            format!("{}", r.dt),
            format!("{}", r.dx),
            format!("{}", r.delta),
            r.metric.to_string(),
            r.alpha.map_or(String::new(), |a| format!("{a}")),
            format!("{}", r.h),
            format!("{}", r.t),
            format!("{}", r.mean_err),
            format!("{}", r.var_err),
            format!("{}", r.n_reps),
            r.min_det.map_or(String::new(), |m| format!("{m}")),
            format!("{}", r.runtime_ms),
        ];
        w.write_record(&rec).map_err(crate::flow::csv_error)?;
    }
    w.flush()?;
    Ok(())
}
