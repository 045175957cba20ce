//! Closed-form velocity fields: the test catalog's analytic entries.
//!
//! All entries are autonomous and divergence-free. The planar entries place
//! a feature at a configurable center and cut it off smoothly before radius
//! 1/2 so the field is well defined on the torus.

use crate::torus::min_image;
use serde::{Deserialize, Serialize};

/// Quintic smoothstep S(s) = 6s⁵ − 15s⁴ + 10s³ (C² at both endpoints).
#[inline]
fn smoothstep(s: f64) -> f64 {
    if s <= 0.0 {
        0.0
    } else if s >= 1.0 {
        1.0
    } else {
        s * s * s * (10.0 + s * (-15.0 + 6.0 * s))
    }
}

#[inline]
fn smoothstep_derivative(s: f64) -> f64 {
    if s <= 0.0 || s >= 1.0 {
        0.0
    } else {
        30.0 * s * s * (s - 1.0) * (s - 1.0)
    }
}

/// Radial cutoff χ: 1 on [0, r_in], 0 on [r_out, ∞), quintic in between.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RadialCutoff {
    pub r_in: f64,
    pub r_out: f64,
}

impl RadialCutoff {
    #[inline]
    pub fn value(&self, r: f64) -> f64 {
        1.0 - smoothstep((r - self.r_in) / (self.r_out - self.r_in))
    }

    #[inline]
    pub fn derivative(&self, r: f64) -> f64 {
        -smoothstep_derivative((r - self.r_in) / (self.r_out - self.r_in))
            / (self.r_out - self.r_in)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum AnalyticField {
    /// u ≡ c.
    Constant { velocity: Vec<f64> },
    /// u(x) = (sin(2π x₂), 0) on 𝕋².
    ShearSine,
    /// Angular velocity ω inside radius r_in around `center`, smoothly cut
    /// to zero by r_out < 1/2: u = ω χ(r) (−y₂, y₁) with y = x − center.
    /// Each particle stays on its circle and rotates at rate ω χ(r).
    RigidRotationPatch {
        center: [f64; 2],
        omega: f64,
        cutoff: RadialCutoff,
    },
    /// u = ∇⊥ψ with stream function ψ = r^α χ(r): tangential speed
    /// |u| = |α r^{α−1} χ + r^α χ′|, so |Du| ~ r^{α−2} near the center and
    /// Du ∈ L^p exactly when (2−α)p < 2 in d = 2.
    RadialVortex {
        center: [f64; 2],
        alpha: f64,
        cutoff: RadialCutoff,
    },
}

impl AnalyticField {
    pub fn dim(&self) -> usize {
        match self {
            AnalyticField::Constant { velocity } => velocity.len(),
            _ => 2,
        }
    }

    /// Writes u(x) into `out`; autonomous, so no time argument.
    #[inline]
    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        match self {
            AnalyticField::Constant { velocity } => out.copy_from_slice(velocity),
            AnalyticField::ShearSine => {
                out[0] = (2.0 * std::f64::consts::PI * x[1]).sin();
                out[1] = 0.0;
            }
            AnalyticField::RigidRotationPatch {
                center,
                omega,
                cutoff,
            } => {
                let y0 = min_image(x[0] - center[0]);
                let y1 = min_image(x[1] - center[1]);
                let r = (y0 * y0 + y1 * y1).sqrt();
                let w = omega * cutoff.value(r);
                out[0] = -w * y1;
                out[1] = w * y0;
            }
            AnalyticField::RadialVortex {
                center,
                alpha,
                cutoff,
            } => {
                let y0 = min_image(x[0] - center[0]);
                let y1 = min_image(x[1] - center[1]);
                let r = (y0 * y0 + y1 * y1).sqrt();
                if r == 0.0 || r >= cutoff.r_out {
                    out[0] = 0.0;
                    out[1] = 0.0;
                    return;
                }
                // ψ′(r)/r, so that u = ψ′(r) · θ̂ = (ψ′/r)(−y₂, y₁).
                let r_pow = r.powf(alpha - 1.0);
                let dpsi = alpha * r_pow * cutoff.value(r) + r_pow * r * cutoff.derivative(r);
                let s = dpsi / r;
                out[0] = -s * y1;
                out[1] = s * y0;
            }
        }
    }

    /// Tangential speed profile |u| at radius r (planar entries only).
    pub fn speed_profile(&self, r: f64) -> f64 {
        match self {
            AnalyticField::RigidRotationPatch { omega, cutoff, .. } => {
                (omega * cutoff.value(r) * r).abs()
            }
            AnalyticField::RadialVortex { alpha, cutoff, .. } => {
                if r <= 0.0 || r >= cutoff.r_out {
                    0.0
                } else {
                    (alpha * r.powf(alpha - 1.0) * cutoff.value(r)
                        + r.powf(*alpha) * cutoff.derivative(r))
                    .abs()
                }
            }
            AnalyticField::Constant { velocity } => {
                velocity.iter().map(|c| c * c).sum::<f64>().sqrt()
            }
            AnalyticField::ShearSine => 1.0,
        }
    }

    /// A true bound on ‖u‖_∞, from the closed form where available and from
    /// dense sampling of the 1-D speed profile otherwise.
    pub fn sup_norm(&self) -> f64 {
        match self {
            AnalyticField::Constant { velocity } => {
                velocity.iter().map(|c| c * c).sum::<f64>().sqrt()
            }
            AnalyticField::ShearSine => 1.0,
            AnalyticField::RigidRotationPatch { cutoff, .. }
            | AnalyticField::RadialVortex { cutoff, .. } => {
                let n = 200_000;
                let mut max = 0.0f64;
                for i in 0..=n {
                    let r = cutoff.r_out * i as f64 / n as f64;
                    max = max.max(self.speed_profile(r));
                }
                max * (1.0 + 1e-9) + 1e-15
            }
        }
    }

    /// Exact flow of the rotation patch: radius is preserved and the angle
    /// advances at rate ω χ(r). Returns unwrapped coordinates.
    pub fn rotate_patch_exact(center: &[f64; 2], omega: f64, cutoff: &RadialCutoff, x: &[f64], t: f64) -> [f64; 2] {
        let y0 = min_image(x[0] - center[0]);
        let y1 = min_image(x[1] - center[1]);
        let r = (y0 * y0 + y1 * y1).sqrt();
        let theta = omega * cutoff.value(r) * t;
        let (s, c) = theta.sin_cos();
        [
            center[0] + c * y0 - s * y1,
            center[1] + s * y0 + c * y1,
        ]
    }
}
