//! Finite partitions {Q_i} of the torus.
//!
//! The schemes only need three structural facts about a mesh: every cell has
//! diameter ≤ Δx, volumes are bounded below, and masses M_i = ∫_{Q_i} ρ₀ can
//! be computed consistently. Three constructions are provided — axis-aligned
//! boxes, a jittered box complex (re-split into convex cells where a
//! displaced quad goes reflex), and a periodic Voronoi tessellation — all
//! sharing one quadrature, location, and sampling interface.
//!
//! Cell masses use per-cell low-discrepancy quadrature: Halton points are
//! mapped exactly onto box cells and rejected from bounding boxes onto
//! polygonal ones, then averaged against the exact cell volume. Constant
//! densities therefore reproduce cell volumes to machine precision, and
//! totals agree with a global quadrature of ρ₀ to the accuracy of the
//! per-cell rules.

use crate::error::{Error, Result};
use crate::qmc::{halton_point, MAX_DIM};
use crate::torus::{min_image, wrap_slice, TorusPoint};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::{Arc, Mutex};

/// Densities integrated and sampled against a mesh. `sup_bound` must be a
/// true upper bound on the density; rejection sampling depends on it.
pub trait Density: Sync {
    fn eval(&self, x: &[f64]) -> f64;
    fn sup_bound(&self) -> f64;
}

/// Uniform density ρ ≡ 1.
pub struct UniformDensity;

impl Density for UniformDensity {
    fn eval(&self, _x: &[f64]) -> f64 {
        1.0
    }
    fn sup_bound(&self) -> f64 {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeshKind {
    Cartesian,
    Jittered,
    Voronoi,
}

/// Geometry payload of a cell, in coordinates unwrapped near the cell (a
/// cell may straddle the periodic seam; its diameter is < 1/2, so shifting a
/// query point by the minimal displacement from the anchor makes containment
/// tests exact).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum CellGeometry {
    /// Axis-aligned box [lo, lo+side) per axis.
    Box { lo: Vec<f64>, side: Vec<f64> },
    /// 1-D arc [lo, lo+len) (unwrapped; lo+len may exceed 1).
    Interval { lo: f64, len: f64 },
    /// Convex polygon, counter-clockwise vertices; `base` is the index of
    /// the jittered box-complex quad this cell came from.
    Polygon {
        base: [usize; 2],
        vertices: Vec<[f64; 2]>,
    },
    /// Planar Voronoi cell: generating site plus clipped convex polygon.
    VoronoiPolygon {
        site: [f64; 2],
        vertices: Vec<[f64; 2]>,
    },
    /// 1-D Voronoi cell: site owning the arc [lo, lo+len).
    VoronoiArc { site: f64, lo: f64, len: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Cell {
    pub id: usize,
    pub volume: f64,
    pub diameter: f64,
    /// Deterministic interior point (box/polygon centroid, Voronoi site).
    pub anchor: TorusPoint,
    pub geometry: CellGeometry,
}

/// Quadrature nodes for one mesh: per-cell Halton nodes, equally many in
/// every cell, each list integrating its cell with weight volume/count.
#[derive(Debug)]
pub struct CellQuadrature {
    pub dim: usize,
    pub n_total: usize,
    /// Flat d-coordinate node lists, one per cell, wrapped to [0,1)^d.
    pub per_cell: Vec<Vec<f64>>,
}

impl CellQuadrature {
    pub fn node_count(&self, cell: usize) -> usize {
        self.per_cell[cell].len() / self.dim
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Mesh {
    pub kind: MeshKind,
    pub dim: usize,
    /// Requested resolution N (boxes/vertices/sites per axis).
    pub resolution: usize,
    pub jitter: f64,
    pub seed: u64,
    /// The diameter bound Δx: every cell diameter is ≤ dx.
    pub dx: f64,
    /// Measured min_i |Q_i| / dx^d — the volume lower-bound constant.
    pub min_volume_ratio: f64,
    pub cells: Vec<Cell>,
    #[serde(skip)]
    quad_cache: Mutex<HashMap<usize, Arc<CellQuadrature>>>,
}

const DEGENERATE_VOLUME: f64 = 1e-12;
/// Floor on the mesh-wide quadrature point count: cheap at desk scale and
/// keeps the total-mass error well under the 10⁻⁴ contract.
const MIN_TOTAL_QUAD: usize = 1 << 17;
const MAX_REJECTION_TRIES: usize = 200_000;

pub fn build_mesh(
    kind: MeshKind,
    dim: usize,
    resolution: usize,
    jitter: f64,
    seed: u64,
) -> Result<Mesh> {
    if !(1..=3).contains(&dim) {
        return Err(Error::invalid(format!("mesh dimension {dim} not in 1..=3")));
    }
    if resolution < 2 {
        return Err(Error::invalid("mesh resolution must be ≥ 2"));
    }
    if !(0.0..0.5).contains(&jitter) {
        return Err(Error::invalid("jitter must lie in [0, 1/2)"));
    }
    let cells = match (kind, dim) {
        (MeshKind::Cartesian, _) => build_cartesian(dim, resolution),
        (MeshKind::Jittered, 1) => build_jittered_1d(resolution, jitter, seed)?,
        (MeshKind::Jittered, 2) => build_jittered_2d(resolution, jitter, seed)?,
        (MeshKind::Voronoi, 1) => build_voronoi_1d(resolution, seed)?,
        (MeshKind::Voronoi, 2) => build_voronoi_2d(resolution, seed)?,
        (MeshKind::Jittered | MeshKind::Voronoi, _) => {
            return Err(Error::UnsupportedRegime(format!(
                "{kind:?} meshes are implemented for d ≤ 2 (requested d={dim})"
            )))
        }
    };
    finalize(kind, dim, resolution, jitter, seed, cells)
}

fn finalize(
    kind: MeshKind,
    dim: usize,
    resolution: usize,
    jitter: f64,
    seed: u64,
    cells: Vec<Cell>,
) -> Result<Mesh> {
    let mut total = 0.0;
    let mut max_diam = 0.0f64;
    let mut min_vol = f64::INFINITY;
    for (i, c) in cells.iter().enumerate() {
        if c.id != i {
            return Err(Error::invalid("cell ids must be sequential"));
        }
        if !(c.volume > DEGENERATE_VOLUME) {
            return Err(Error::invalid(format!(
                "degenerate cell {i}: volume {}",
                c.volume
            )));
        }
        // On the unit torus no Voronoi cell can exceed √2/2 ≈ 0.707; the
        // jittered builder separately guarantees diameters < 1/2 so its
        // periodic containment charts stay unambiguous.
        if !(c.diameter > 0.0 && c.diameter < 0.75) {
            return Err(Error::invalid(format!(
                "cell {i} diameter {} outside (0, 0.75); refine the mesh",
                c.diameter
            )));
        }
        total += c.volume;
        max_diam = max_diam.max(c.diameter);
        min_vol = min_vol.min(c.volume);
    }
    if (total - 1.0).abs() > 1e-8 {
        return Err(Error::invalid(format!(
            "cell volumes sum to {total}, not 1"
        )));
    }
    let dx = max_diam;
    let mesh = Mesh {
        kind,
        dim,
        resolution,
        jitter,
        seed,
        dx,
        min_volume_ratio: min_vol / dx.powi(dim as i32),
        cells,
        quad_cache: Mutex::new(HashMap::new()),
    };
    for c in &mesh.cells {
        if mesh.locate(c.anchor.coords()) != c.id {
            return Err(Error::invalid(format!(
                "anchor of cell {} does not locate to its own cell",
                c.id
            )));
        }
    }
    Ok(mesh)
}

fn build_cartesian(dim: usize, n: usize) -> Vec<Cell> {
    let side = 1.0 / n as f64;
    let diameter = (dim as f64).sqrt() * side;
    let n_cells = n.pow(dim as u32);
    let mut cells = Vec::with_capacity(n_cells);
    for id in 0..n_cells {
        let mut rest = id;
        let mut lo = Vec::with_capacity(dim);
        let mut center = Vec::with_capacity(dim);
        for _ in 0..dim {
            let i = rest % n;
            rest /= n;
            lo.push(i as f64 / n as f64);
            center.push((i as f64 + 0.5) / n as f64);
        }
        cells.push(Cell {
            id,
            volume: side.powi(dim as i32),
            diameter,
            anchor: TorusPoint::new(center).expect("cartesian center is finite"),
            geometry: CellGeometry::Box {
                lo,
                side: vec![side; dim],
            },
        });
    }
    cells
}

fn build_jittered_1d(n: usize, jitter: f64, seed: u64) -> Result<Vec<Cell>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut verts = Vec::with_capacity(n);
    for i in 0..n {
        let u: f64 = rng.gen_range(-1.0..1.0);
        verts.push((i as f64 + jitter * u) / n as f64);
    }
    let mut cells = Vec::with_capacity(n);
    for id in 0..n {
        let lo = verts[id];
        let hi = if id + 1 < n { verts[id + 1] } else { verts[0] + 1.0 };
        let len = hi - lo;
        if len <= DEGENERATE_VOLUME {
            return Err(Error::invalid("jittered interval collapsed"));
        }
        cells.push(Cell {
            id,
            volume: len,
            diameter: len,
            anchor: TorusPoint::new(vec![crate::torus::wrap_unit(lo + 0.5 * len)])?,
            geometry: CellGeometry::Interval { lo, len },
        });
    }
    Ok(cells)
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn polygon_area(v: &[[f64; 2]]) -> f64 {
    let mut s = 0.0;
    for i in 0..v.len() {
        let j = (i + 1) % v.len();
        s += v[i][0] * v[j][1] - v[j][0] * v[i][1];
    }
    0.5 * s
}

fn polygon_centroid(v: &[[f64; 2]]) -> [f64; 2] {
    let a = polygon_area(v);
    let mut cx = 0.0;
    let mut cy = 0.0;
    for i in 0..v.len() {
        let j = (i + 1) % v.len();
        let w = v[i][0] * v[j][1] - v[j][0] * v[i][1];
        cx += (v[i][0] + v[j][0]) * w;
        cy += (v[i][1] + v[j][1]) * w;
    }
    [cx / (6.0 * a), cy / (6.0 * a)]
}

fn polygon_diameter(v: &[[f64; 2]]) -> f64 {
    let mut best = 0.0f64;
    for i in 0..v.len() {
        for j in i + 1..v.len() {
            let dx = v[i][0] - v[j][0];
            let dy = v[i][1] - v[j][1];
            best = best.max((dx * dx + dy * dy).sqrt());
        }
    }
    best
}

/// Closed-cell containment with a small tolerance: shared edges belong to
/// both neighbors and the caller breaks the tie by id.
fn polygon_contains(v: &[[f64; 2]], p: [f64; 2]) -> bool {
    for i in 0..v.len() {
        let j = (i + 1) % v.len();
        if cross(v[i], v[j], p) < -1e-12 {
            return false;
        }
    }
    true
}

fn build_jittered_2d(n: usize, jitter: f64, seed: u64) -> Result<Vec<Cell>> {
    // Every displaced quad must keep diameter < 1/2 so periodic containment
    // tests stay unambiguous: quads span at most (1 + 2·jitter)/N per axis.
    if (1.0 + 2.0 * jitter) / n as f64 >= 0.35 {
        return Err(Error::invalid(format!(
            "jittered mesh too coarse: (1+2·jitter)/N = {} must be < 0.35",
            (1.0 + 2.0 * jitter) / n as f64
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut verts = vec![[0.0f64; 2]; n * n];
    for j in 0..n {
        for i in 0..n {
            let u: f64 = rng.gen_range(-1.0..1.0);
            let w: f64 = rng.gen_range(-1.0..1.0);
            verts[j * n + i] = [
                (i as f64 + jitter * u) / n as f64,
                (j as f64 + jitter * w) / n as f64,
            ];
        }
    }
    // Vertex (i, j) of the periodic complex, unwrapped so that quad (qi, qj)
    // reads its four corners in one consistent chart.
    let vertex = |i: usize, j: usize| -> [f64; 2] {
        let base = verts[(j % n) * n + (i % n)];
        [
            base[0] + (i / n) as f64,
            base[1] + (j / n) as f64,
        ]
    };
    let mut cells = Vec::new();
    for qj in 0..n {
        for qi in 0..n {
            let quad = [
                vertex(qi, qj),
                vertex(qi + 1, qj),
                vertex(qi + 1, qj + 1),
                vertex(qi, qj + 1),
            ];
            let crosses: Vec<f64> = (0..4)
                .map(|k| cross(quad[k], quad[(k + 1) % 4], quad[(k + 2) % 4]))
                .collect();
            let polys: Vec<Vec<[f64; 2]>> = if crosses.iter().all(|&c| c > 1e-12) {
                vec![quad.to_vec()]
            } else {
                // One corner went reflex; the diagonal from it stays inside.
                let k = crosses
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| (i + 1) % 4)
                    .unwrap();
                let q = |off: usize| quad[(k + off) % 4];
                vec![
                    vec![q(0), q(1), q(2)],
                    vec![q(0), q(2), q(3)],
                ]
            };
            for poly in polys {
                let area = polygon_area(&poly);
                if area <= DEGENERATE_VOLUME {
                    return Err(Error::invalid("jittered cell collapsed"));
                }
                let centroid = polygon_centroid(&poly);
                let id = cells.len();
                cells.push(Cell {
                    id,
                    volume: area,
                    diameter: polygon_diameter(&poly),
                    anchor: TorusPoint::new(vec![
                        crate::torus::wrap_unit(centroid[0]),
                        crate::torus::wrap_unit(centroid[1]),
                    ])?,
                    geometry: CellGeometry::Polygon {
                        base: [qi, qj],
                        vertices: poly,
                    },
                });
            }
        }
    }
    Ok(cells)
}

fn build_voronoi_1d(n: usize, seed: u64) -> Result<Vec<Cell>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sites: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sites[a].total_cmp(&sites[b]));
    for w in order.windows(2) {
        if (sites[w[1]] - sites[w[0]]).abs() < 1e-9 {
            return Err(Error::invalid("duplicate Voronoi sites"));
        }
    }
    let mut cells: Vec<Option<Cell>> = (0..n).map(|_| None).collect();
    for pos in 0..n {
        let k = order[pos];
        let prev = sites[order[(pos + n - 1) % n]] - if pos == 0 { 1.0 } else { 0.0 };
        let next = sites[order[(pos + 1) % n]] + if pos + 1 == n { 1.0 } else { 0.0 };
        let lo = 0.5 * (prev + sites[k]);
        let hi = 0.5 * (sites[k] + next);
        let len = hi - lo;
        cells[k] = Some(Cell {
            id: k,
            volume: len,
            diameter: len,
            anchor: TorusPoint::new(vec![sites[k]])?,
            geometry: CellGeometry::VoronoiArc {
                site: sites[k],
                lo,
                len,
            },
        });
    }
    Ok(cells.into_iter().map(|c| c.unwrap()).collect())
}

fn build_voronoi_2d(n: usize, seed: u64) -> Result<Vec<Cell>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_sites = n * n;
    let sites: Vec<[f64; 2]> = (0..n_sites)
        .map(|_| [rng.gen::<f64>(), rng.gen::<f64>()])
        .collect();
    for a in 0..n_sites {
        for b in a + 1..n_sites {
            let dx = min_image(sites[a][0] - sites[b][0]);
            let dy = min_image(sites[a][1] - sites[b][1]);
            if (dx * dx + dy * dy).sqrt() < 1e-9 {
                return Err(Error::invalid("duplicate Voronoi sites"));
            }
        }
    }
    // All periodic replicas that can influence a cell.
    let mut cells = Vec::with_capacity(n_sites);
    for (k, &site) in sites.iter().enumerate() {
        let mut neighbors: Vec<[f64; 2]> = Vec::with_capacity(9 * n_sites - 1);
        for (m, &other) in sites.iter().enumerate() {
            for sx in -1i32..=1 {
                for sy in -1i32..=1 {
                    if m == k && sx == 0 && sy == 0 {
                        continue;
                    }
                    neighbors.push([
                        other[0] + sx as f64 - site[0],
                        other[1] + sy as f64 - site[1],
                    ]);
                }
            }
        }
        neighbors.sort_by(|a, b| {
            (a[0] * a[0] + a[1] * a[1]).total_cmp(&(b[0] * b[0] + b[1] * b[1]))
        });
        // Clip a generous site-centered square by perpendicular bisectors,
        // nearest neighbors first; once half the neighbor distance exceeds
        // the farthest current vertex no later bisector can cut.
        let mut poly: Vec<[f64; 2]> = vec![
            [-0.75, -0.75],
            [0.75, -0.75],
            [0.75, 0.75],
            [-0.75, 0.75],
        ];
        for nb in &neighbors {
            let dist = (nb[0] * nb[0] + nb[1] * nb[1]).sqrt();
            let max_r = poly
                .iter()
                .map(|v| (v[0] * v[0] + v[1] * v[1]).sqrt())
                .fold(0.0f64, f64::max);
            if 0.5 * dist > max_r {
                break;
            }
            poly = clip_halfplane(&poly, *nb);
            if poly.len() < 3 {
                return Err(Error::invalid("Voronoi cell collapsed during clipping"));
            }
        }
        // Back to absolute (unwrapped) coordinates around the site.
        let vertices: Vec<[f64; 2]> = poly
            .iter()
            .map(|v| [site[0] + v[0], site[1] + v[1]])
            .collect();
        let area = polygon_area(&vertices);
        if area <= DEGENERATE_VOLUME {
            return Err(Error::invalid("degenerate Voronoi cell"));
        }
        cells.push(Cell {
            id: k,
            volume: area,
            diameter: polygon_diameter(&vertices),
            anchor: TorusPoint::new(site.to_vec())?,
            geometry: CellGeometry::VoronoiPolygon { site, vertices },
        });
    }
    Ok(cells)
}

/// Clips a convex CCW polygon (site at the origin) by the half-plane of
/// points nearer the origin than the neighbor offset `nb`.
fn clip_halfplane(poly: &[[f64; 2]], nb: [f64; 2]) -> Vec<[f64; 2]> {
    let half = 0.5 * (nb[0] * nb[0] + nb[1] * nb[1]);
    let inside = |p: [f64; 2]| p[0] * nb[0] + p[1] * nb[1] <= half;
    let mut out = Vec::with_capacity(poly.len() + 1);
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let ia = inside(a);
        let ib = inside(b);
        if ia {
            out.push(a);
        }
        if ia != ib {
            let da = a[0] * nb[0] + a[1] * nb[1] - half;
            let db = b[0] * nb[0] + b[1] * nb[1] - half;
            let t = da / (da - db);
            out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
        }
    }
    out
}

/// Representative sampling modes. Density mode draws from ρ₀ restricted to
/// the cell, normalized by the (caller-supplied) cell mass.
pub enum SampleMode<'a> {
    Uniform,
    Density {
        rho: &'a dyn Density,
        cell_mass: f64,
    },
}

impl Mesh {
    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    /// Returns the id of the cell containing x. Boundary ties resolve to
    /// the lowest id, so this is a total, single-valued function.
    pub fn locate(&self, x: &[f64]) -> usize {
        debug_assert_eq!(x.len(), self.dim);
        match self.kind {
            MeshKind::Cartesian => self.locate_cartesian(x),
            MeshKind::Jittered => match self.dim {
                1 => self.locate_interval(x[0]),
                _ => self.locate_jittered_2d(x),
            },
            MeshKind::Voronoi => self.locate_voronoi(x),
        }
    }

    fn locate_cartesian(&self, x: &[f64]) -> usize {
        let n = self.resolution;
        // Coordinates exactly on a face belong to both closed neighbors;
        // enumerate the candidates per axis and take the lowest id.
        let mut cands: [[usize; 2]; MAX_DIM] = [[0; 2]; MAX_DIM];
        let mut n_cands = [1usize; MAX_DIM];
        for (k, &xk) in x.iter().enumerate() {
            let scaled = xk * n as f64;
            let i = (scaled.floor() as usize).min(n - 1);
            cands[k][0] = i;
            if scaled == scaled.floor() {
                cands[k][1] = (i + n - 1) % n;
                n_cands[k] = 2;
            }
        }
        let mut best = usize::MAX;
        let combos: usize = n_cands[..x.len()].iter().product();
        for c in 0..combos {
            let mut rest = c;
            let mut id = 0usize;
            let mut stride = 1usize;
            for k in 0..x.len() {
                let pick = rest % n_cands[k];
                rest /= n_cands[k];
                id += cands[k][pick] * stride;
                stride *= n;
            }
            best = best.min(id);
        }
        best
    }

    fn locate_interval(&self, x: f64) -> usize {
        let mut best = usize::MAX;
        for c in &self.cells {
            let (lo, len) = match c.geometry {
                CellGeometry::Interval { lo, len } => (lo, len),
                CellGeometry::VoronoiArc { lo, len, .. } => (lo, len),
                _ => unreachable!("1-D mesh with planar geometry"),
            };
            let rel = x - lo - (x - lo).floor();
            if rel <= len + 1e-12 || rel >= 1.0 - 1e-12 {
                best = best.min(c.id);
            }
        }
        best
    }

    fn locate_jittered_2d(&self, x: &[f64]) -> usize {
        let n = self.resolution;
        let bi = ((x[0] * n as f64).floor() as i64).rem_euclid(n as i64) as usize;
        let bj = ((x[1] * n as f64).floor() as i64).rem_euclid(n as i64) as usize;
        let mut best = usize::MAX;
        let mut nearest = (f64::INFINITY, usize::MAX);
        for c in &self.cells {
            let (base, verts) = match &c.geometry {
                CellGeometry::Polygon { base, vertices } => (base, vertices),
                _ => unreachable!("jittered 2-D mesh with foreign geometry"),
            };
            let di = (base[0] as i64 - bi as i64).rem_euclid(n as i64);
            let dj = (base[1] as i64 - bj as i64).rem_euclid(n as i64);
            let near = |d: i64| d <= 1 || d == n as i64 - 1;
            if !(near(di) && near(dj)) {
                continue;
            }
            // Shift the query into the cell's unwrapped chart.
            let a = c.anchor.coords();
            let p = [
                a[0] + min_image(x[0] - a[0]),
                a[1] + min_image(x[1] - a[1]),
            ];
            // The chart anchor is the wrapped centroid; realign to the
            // stored vertices, which may live one period away.
            let centroid = polygon_centroid(verts);
            let q = [
                p[0] + (centroid[0] - a[0]).round(),
                p[1] + (centroid[1] - a[1]).round(),
            ];
            if polygon_contains(verts, q) {
                best = best.min(c.id);
            }
            let dist2 = (q[0] - centroid[0]).powi(2) + (q[1] - centroid[1]).powi(2);
            if dist2 < nearest.0 {
                nearest = (dist2, c.id);
            }
        }
        if best != usize::MAX {
            best
        } else {
            // Numerically between closed cells; fall back to the nearest
            // candidate centroid so locate stays total.
            nearest.1
        }
    }

    fn locate_voronoi(&self, x: &[f64]) -> usize {
        let mut best = (f64::INFINITY, usize::MAX);
        for c in &self.cells {
            let site: &[f64] = match &c.geometry {
                CellGeometry::VoronoiPolygon { site, .. } => site,
                CellGeometry::VoronoiArc { site, .. } => std::slice::from_ref(site),
                _ => unreachable!("voronoi mesh with foreign geometry"),
            };
            let mut d2 = 0.0;
            for k in 0..self.dim {
                let d = min_image(x[k] - site[k]);
                d2 += d * d;
            }
            if d2 < best.0 {
                best = (d2, c.id);
            }
        }
        best.1
    }

    /// The cached per-cell quadrature. Every cell receives the same node
    /// count: `quad_per_cell`, floored so the mesh-wide total stays large;
    /// in d = 1 the count is rounded to a power of two, where the Halton
    /// sequence degenerates to a uniform grid and smooth densities
    /// integrate near-exactly. Nodes map exactly onto box cells and are
    /// rejection-filtered from bounding boxes onto polygonal ones.
    pub fn quadrature(&self, quad_per_cell: usize) -> Result<Arc<CellQuadrature>> {
        if quad_per_cell < 32 {
            return Err(Error::invalid("quad_per_cell must be ≥ 32"));
        }
        let mut target = quad_per_cell.max(MIN_TOTAL_QUAD / self.n_cells()).max(32);
        if self.dim == 1 {
            target = target.next_power_of_two();
        }
        self.fixed_quadrature(target)
    }

    /// Like [`Mesh::quadrature`] but with exactly `nodes_per_cell` nodes in
    /// every cell: no mesh-wide floor and no d = 1 rounding. Meant for
    /// particle clouds whose atom count must track the cell count, not for
    /// accurate integration.
    pub fn fixed_quadrature(&self, nodes_per_cell: usize) -> Result<Arc<CellQuadrature>> {
        if nodes_per_cell == 0 {
            return Err(Error::invalid("nodes_per_cell must be ≥ 1"));
        }
        let mut cache = self.quad_cache.lock().expect("quadrature cache poisoned");
        if let Some(q) = cache.get(&nodes_per_cell) {
            return Ok(Arc::clone(q));
        }
        let mut per_cell = Vec::with_capacity(self.n_cells());
        for cell in &self.cells {
            per_cell.push(self.cell_nodes(cell, nodes_per_cell)?);
        }
        let quad = Arc::new(CellQuadrature {
            dim: self.dim,
            n_total: nodes_per_cell * self.n_cells(),
            per_cell,
        });
        cache.insert(nodes_per_cell, Arc::clone(&quad));
        Ok(quad)
    }

    fn cell_nodes(&self, c: &Cell, target: usize) -> Result<Vec<f64>> {
        let d = self.dim;
        let mut out = Vec::with_capacity(target * d);
        match &c.geometry {
            CellGeometry::Box { lo, side } => {
                let mut u = [0.0f64; MAX_DIM];
                for j in 0..target {
                    halton_point(j as u64, &mut u[..d]);
                    for k in 0..d {
                        out.push(crate::torus::wrap_unit(lo[k] + u[k] * side[k]));
                    }
                }
            }
            CellGeometry::Interval { lo, len }
            | CellGeometry::VoronoiArc { lo, len, .. } => {
                let mut u = [0.0f64; 1];
                for j in 0..target {
                    halton_point(j as u64, &mut u);
                    out.push(crate::torus::wrap_unit(lo + u[0] * len));
                }
            }
            CellGeometry::Polygon { vertices, .. }
            | CellGeometry::VoronoiPolygon { vertices, .. } => {
                let (blo, bext) = self.bounding_box(c);
                let mut u = [0.0f64; 2];
                let mut j = 0u64;
                let cap = target as u64 * 4000;
                while out.len() < target * 2 {
                    if j >= cap {
                        return Err(Error::Capacity(format!(
                            "quadrature rejection for cell {} stalled",
                            c.id
                        )));
                    }
                    halton_point(j, &mut u);
                    j += 1;
                    let p = [blo[0] + u[0] * bext[0], blo[1] + u[1] * bext[1]];
                    if polygon_contains(vertices, p) {
                        out.push(crate::torus::wrap_unit(p[0]));
                        out.push(crate::torus::wrap_unit(p[1]));
                    }
                }
            }
        }
        Ok(out)
    }

    /// All cell masses M_i = ∫_{Q_i} ρ₀ dx: per-cell low-discrepancy node
    /// averages against exact cell volumes, so constant densities give the
    /// volumes back to machine precision.
    pub fn cell_masses(&self, rho: &dyn Density, quad_per_cell: usize) -> Result<Vec<f64>> {
        let quad = self.quadrature(quad_per_cell)?;
        let d = self.dim;
        let mut masses = Vec::with_capacity(self.n_cells());
        for cell in &self.cells {
            let pts = &quad.per_cell[cell.id];
            let n_pts = pts.len() / d;
            let mut s = 0.0;
            for p in pts.chunks_exact(d) {
                let v = rho.eval(p);
                check_density_sample(v)?;
                s += v;
            }
            masses.push(cell.volume * s / n_pts as f64);
        }
        Ok(masses)
    }

    /// Mass of one cell; see `cell_masses` for the quadrature contract.
    pub fn cell_mass(
        &self,
        cell: usize,
        rho: &dyn Density,
        quad_per_cell: usize,
    ) -> Result<f64> {
        if cell >= self.n_cells() {
            return Err(Error::invalid(format!("no cell {cell}")));
        }
        Ok(self.cell_masses(rho, quad_per_cell)?[cell])
    }

    /// Draws a representative point of the cell: uniformly, or proportional
    /// to ρ₀ restricted to the cell. Zero-mass cells signal `EmptyCell`; the
    /// caller assigns them zero weight instead of an atom.
    pub fn sample_representative(
        &self,
        cell: usize,
        rng: &mut impl Rng,
        mode: &SampleMode,
    ) -> Result<TorusPoint> {
        let c = self
            .cells
            .get(cell)
            .ok_or_else(|| Error::invalid(format!("no cell {cell}")))?;
        let sup = match mode {
            SampleMode::Uniform => 0.0,
            SampleMode::Density { rho, cell_mass } => {
                if !(*cell_mass > 0.0) {
                    return Err(Error::EmptyCell { cell });
                }
                let s = rho.sup_bound();
                if !(s > 0.0 && s.is_finite()) {
                    return Err(Error::invalid("density sup bound must be positive"));
                }
                s
            }
        };
        let (lo, extent) = self.bounding_box(c);
        let d = self.dim;
        let mut candidate = [0.0f64; MAX_DIM];
        for _ in 0..MAX_REJECTION_TRIES {
            for k in 0..d {
                candidate[k] = lo[k] + rng.gen::<f64>() * extent[k];
            }
            wrap_slice(&mut candidate[..d]);
            if self.locate(&candidate[..d]) != cell {
                continue;
            }
            if let SampleMode::Density { rho, .. } = mode {
                let v = rho.eval(&candidate[..d]);
                check_density_sample(v)?;
                // Honest acceptance draw even when v == sup, so density
                // sampling with a constant ρ₀ matches uniform sampling in
                // distribution but not sample-for-sample.
                if rng.gen::<f64>() * sup > v {
                    continue;
                }
            }
            return TorusPoint::from_slice(&candidate[..d]);
        }
        Err(Error::Capacity(format!(
            "rejection sampling for cell {cell} did not accept in {MAX_REJECTION_TRIES} tries"
        )))
    }

    fn bounding_box(&self, c: &Cell) -> ([f64; MAX_DIM], [f64; MAX_DIM]) {
        let mut lo = [0.0f64; MAX_DIM];
        let mut extent = [0.0f64; MAX_DIM];
        match &c.geometry {
            CellGeometry::Box { lo: l, side } => {
                lo[..self.dim].copy_from_slice(l);
                extent[..self.dim].copy_from_slice(side);
            }
            CellGeometry::Interval { lo: l, len }
            | CellGeometry::VoronoiArc { lo: l, len, .. } => {
                lo[0] = *l;
                extent[0] = *len;
            }
            CellGeometry::Polygon { vertices, .. }
            | CellGeometry::VoronoiPolygon { vertices, .. } => {
                let mut hi = [f64::NEG_INFINITY; 2];
                lo[0] = f64::INFINITY;
                lo[1] = f64::INFINITY;
                for v in vertices {
                    for k in 0..2 {
                        lo[k] = lo[k].min(v[k]);
                        hi[k] = hi[k].max(v[k]);
                    }
                }
                extent[0] = hi[0] - lo[0];
                extent[1] = hi[1] - lo[1];
            }
        }
        (lo, extent)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Mesh> {
        let mesh: Mesh =
            serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        // Re-validate everything the builder guarantees.
        finalize(
            mesh.kind,
            mesh.dim,
            mesh.resolution,
            mesh.jitter,
            mesh.seed,
            mesh.cells,
        )
    }
}

fn check_density_sample(v: f64) -> Result<()> {
    if !v.is_finite() || v < 0.0 {
        return Err(Error::invalid(format!(
            "density sample {v} is negative or non-finite"
        )));
    }
    Ok(())
}
