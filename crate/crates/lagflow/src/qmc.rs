//! Low-discrepancy point sequences used by every quadrature in the crate.
//!
//! Halton points with the first d prime bases. In one dimension (base 2,
//! van der Corput) the first 2^m indices reproduce the uniform grid
//! {k/2^m}, so dyadic sample counts integrate smooth periodic integrands to
//! near machine accuracy. Sequences are unseeded and deterministic; callers
//! needing decorrelated streams pass distinct index offsets.

const PRIMES: [u64; 8] = [2, 3, 5, 7, 11, 13, 17, 19];

/// Maximum dimension the quadrature helpers support (stack-buffer bound).
pub const MAX_DIM: usize = 8;

/// Radical inverse of `index` in base `base`, in [0,1).
#[inline]
pub fn radical_inverse(base: u64, mut index: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut x = 0.0;
    while index > 0 {
        x += (index % base) as f64 * f;
        index /= base;
        f *= inv;
    }
    x
}

/// Writes the `index`-th Halton point in dimension `dim` into `out`.
#[inline]
pub fn halton_point(index: u64, out: &mut [f64]) {
    assert!(out.len() <= PRIMES.len(), "dimension above MAX_DIM");
    for (k, slot) in out.iter_mut().enumerate() {
        *slot = radical_inverse(PRIMES[k], index);
    }
}

/// Collects the first `n` Halton points in dimension `dim` (flat n×dim).
pub fn halton_points(n: usize, dim: usize) -> Vec<f64> {
    let mut pts = vec![0.0; n * dim];
    for i in 0..n {
        halton_point(i as u64, &mut pts[i * dim..(i + 1) * dim]);
    }
    pts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn van_der_corput_prefix_is_bit_reversed_grid() {
        // First 8 base-2 points are a permutation of {0, 1/8, …, 7/8}.
        let mut vals: Vec<f64> = (0..8).map(|i| radical_inverse(2, i)).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (k, v) in vals.iter().enumerate() {
            assert!((v - k as f64 / 8.0).abs() < 1e-15);
        }
    }

    #[test]
    fn halton_equidistributes() {
        // Fraction of points in [0, 0.3)×[0, 0.5) ≈ 0.15.
        let n = 4096;
        let pts = halton_points(n, 2);
        let count = (0..n)
            .filter(|&i| pts[2 * i] < 0.3 && pts[2 * i + 1] < 0.5)
            .count();
        let frac = count as f64 / n as f64;
        assert!((frac - 0.15).abs() < 5e-3, "frac = {frac}");
    }

    #[test]
    fn smooth_periodic_integrand_high_accuracy_1d() {
        // ∫₀¹ (1 + sin 2πx) dx = 1; dyadic van der Corput is a uniform grid.
        let n = 1 << 14;
        let mut s = 0.0;
        for i in 0..n {
            let x = radical_inverse(2, i);
            s += 1.0 + (2.0 * std::f64::consts::PI * x).sin();
        }
        s /= n as f64;
        assert!((s - 1.0).abs() < 1e-12, "err = {}", (s - 1.0).abs());
    }
}
