//! Mollifier kernels η on ℝ^d: unit mass, support in the closed unit ball.
//!
//! Two radial profiles are offered. The bump kernel is the classical
//! C^∞ compactly supported profile exp(−1/(1−r²)); the truncated Gaussian
//! has standard deviation 1/4 so its cut at 4σ coincides with the unit
//! sphere, then is renormalized to unit mass on the ball.

use crate::error::{Error, Result};
use crate::quad;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MollifierProfile {
    Bump,
    TruncatedGaussian,
}

impl MollifierProfile {
    /// Unnormalized radial profile g(r) on [0,1].
    #[inline]
    fn radial(self, r: f64) -> f64 {
        match self {
            MollifierProfile::Bump => {
                if r >= 1.0 {
                    0.0
                } else {
                    (-1.0 / (1.0 - r * r)).exp()
                }
            }
            // σ = 1/4, so exp(−r²/(2σ²)) = exp(−8 r²), cut at r = 1 = 4σ.
            MollifierProfile::TruncatedGaussian => {
                if r >= 1.0 {
                    0.0
                } else {
                    (-8.0 * r * r).exp()
                }
            }
        }
    }
}

/// Normalized kernel η in a fixed dimension: η(y) = c · g(|y|), ∫η = 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MollifierKernel {
    profile: MollifierProfile,
    dim: usize,
    norm_const: f64,
}

/// Volume of the d-dimensional unit ball via V_d = V_{d−2} · 2π/d.
fn unit_ball_volume(d: usize) -> f64 {
    match d {
        0 => 1.0,
        1 => 2.0,
        _ => unit_ball_volume(d - 2) * 2.0 * std::f64::consts::PI / d as f64,
    }
}

impl MollifierKernel {
    /// Builds the kernel and verifies unit mass with an independent
    /// quadrature rule to 10^−10.
    pub fn new(profile: MollifierProfile, dim: usize) -> Result<Self> {
        if dim == 0 || dim > crate::qmc::MAX_DIM {
            return Err(Error::invalid(format!(
                "kernel dimension must be in 1..={}, got {dim}",
                crate::qmc::MAX_DIM
            )));
        }
        let surface = dim as f64 * unit_ball_volume(dim);
        let g = |r: f64| profile.radial(r) * r.powi(dim as i32 - 1);
        let mass = surface * quad::integrate(g, 0.0, 1.0, 64);
        // Independent check: composite rule on two subintervals, higher order.
        let mass_check = surface
            * (quad::integrate(g, 0.0, 0.5, 96) + quad::integrate(g, 0.5, 1.0, 96));
        if ((mass - mass_check) / mass).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "kernel normalization quadratures disagree: {mass} vs {mass_check}"
            )));
        }
        Ok(MollifierKernel {
            profile,
            dim,
            norm_const: 1.0 / mass,
        })
    }

    pub fn profile(&self) -> MollifierProfile {
        self.profile
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// η(y); zero outside the open unit ball.
    pub fn density(&self, y: &[f64]) -> f64 {
        debug_assert_eq!(y.len(), self.dim);
        let r2: f64 = y.iter().map(|c| c * c).sum();
        if r2 >= 1.0 {
            return 0.0;
        }
        self.norm_const * self.profile.radial(r2.sqrt())
    }
}
