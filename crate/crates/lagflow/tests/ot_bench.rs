//! Throwaway timing harness for the exact transport solver. Run with
//! `cargo test --test ot_bench -- --ignored --nocapture`.

use lagflow::transport::{wasserstein_exact, DiscreteMeasure, GroundMetric};
use std::time::Instant;

fn halton(index: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    let mut i = index;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

fn cloud(n: usize, shift: f64) -> DiscreteMeasure {
    let pts: Vec<[f64; 2]> = (1..=n)
        .map(|i| {
            let x = (halton(i, 2) + shift).fract();
            let y = (halton(i, 3) + shift * (i % 2 + 1) as f64).fract();
            [x, y]
        })
        .collect();
    let w = vec![1.0 / n as f64; n];
    DiscreteMeasure::new(2, &pts.iter().flat_map(|p| p.iter().copied()).collect::<Vec<_>>(), &w).unwrap()
}

/// Stratified grid cloud (one jittered point per cell of an s×s mesh).
fn grid_cloud(s: usize, seed: u64) -> DiscreteMeasure {
    let n = s * s;
    let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
    let mut rnd = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    let mut pts = Vec::with_capacity(2 * n);
    let dx = 1.0 / s as f64;
    for cy in 0..s {
        for cx in 0..s {
            pts.push((cx as f64 + rnd()) * dx);
            pts.push((cy as f64 + rnd()) * dx);
        }
    }
    DiscreteMeasure::new(2, &pts, &vec![1.0 / n as f64; n]).unwrap()
}

/// Rotates the cloud about (0.5, 0.5) by a tapered angle profile and adds a
/// small deterministic perturbation of size `eps` — mimicking the gap
/// between an Euler-advected cloud and the exactly advected one.
fn rotated(cloud: &DiscreteMeasure, eps: f64) -> DiscreteMeasure {
    let n = cloud.len();
    let mut pts = Vec::with_capacity(2 * n);
    for i in 0..n {
        let p = cloud.position(i);
        let (dx, dy) = (p[0] - 0.5, p[1] - 0.5);
        let r = (dx * dx + dy * dy).sqrt();
        let taper = if r < 0.3 {
            1.0
        } else if r < 0.45 {
            (0.45 - r) / 0.15
        } else {
            0.0
        };
        let th = std::f64::consts::PI * taper;
        let (s, c) = th.sin_cos();
        let rx = 0.5 + c * dx - s * dy;
        let ry = 0.5 + s * dx + c * dy;
        pts.push((rx + eps * ((13.0 * rx).sin())).rem_euclid(1.0));
        pts.push((ry + eps * ((17.0 * ry).cos())).rem_euclid(1.0));
    }
    DiscreteMeasure::new(2, &pts, cloud.weights()).unwrap()
}

#[test]
#[ignore]
fn time_exact_solver_sizes() {
    for (m, n) in [(512, 512), (1024, 1024), (2048, 2048), (4096, 4992)] {
        let mu = cloud(m, 0.0);
        let nu = cloud(n, 0.37);
        let start = Instant::now();
        let plan = wasserstein_exact(&mu, &nu, &GroundMetric::EuclideanTorus).unwrap();
        println!(
            "{m}x{n}: {:?} cost {} pivots {}",
            start.elapsed(),
            plan.cost,
            plan.iterations
        );
    }
}

#[test]
#[ignore]
fn time_near_identity_instances() {
    // Scheme-vs-exact-flow shape: clouds differ by a small displacement.
    for s in [32usize, 64] {
        for eps in [1.0 / 64.0, 1.0 / 256.0] {
            let mu0 = grid_cloud(s, 7);
            let mu = rotated(&mu0, eps);
            let nu = rotated(&mu0, 0.0);
            for metric in [
                GroundMetric::EuclideanTorus,
                GroundMetric::logarithmic(0.5, 1.0 / s as f64).unwrap(),
            ] {
                let start = Instant::now();
                let plan = wasserstein_exact(&mu, &nu, &metric).unwrap();
                println!(
                    "{s}x{s} grid ({} atoms) eps {eps:.5} {metric:?}: {:?} cost {} pivots {}",
                    s * s,
                    start.elapsed(),
                    plan.cost,
                    plan.iterations
                );
            }
        }
    }
}

#[test]
#[ignore]
fn certify_512() {
    let mu = cloud(512, 0.0);
    let nu = cloud(512, 0.37);
    let metric = GroundMetric::EuclideanTorus;
    let plan = wasserstein_exact(&mu, &nu, &metric).unwrap();
    let (m, n) = (mu.len(), nu.len());
    let mut row = vec![0.0; m];
    let mut col = vec![0.0; n];
    for arc in &plan.arcs {
        row[arc.from] += arc.mass;
        col[arc.to] += arc.mass;
    }
    let mut rres = 0.0f64;
    let mut cres = 0.0f64;
    for i in 0..m { rres = rres.max((row[i] - mu.weight(i)).abs()); }
    for j in 0..n { cres = cres.max((col[j] - nu.weight(j)).abs()); }
    let dual: f64 = (0..m).map(|i| mu.weight(i) * plan.potential_mu[i]).sum::<f64>()
        + (0..n).map(|j| nu.weight(j) * plan.potential_nu[j]).sum::<f64>();
    let mut minred = f64::INFINITY;
    for i in 0..m {
        for j in 0..n {
            let c = metric.distance(mu.position(i), nu.position(j));
            minred = minred.min(c - plan.potential_mu[i] - plan.potential_nu[j]);
        }
    }
    println!("primal {} dual {} gap {} rres {rres:e} cres {cres:e} minred {minred:e}",
        plan.cost, dual, plan.cost - dual);
}
