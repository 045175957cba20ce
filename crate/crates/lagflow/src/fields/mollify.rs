//! Spatial mollification u_δ(t,·) = η_δ ∗ u(t,·) by tensor-product
//! quadrature over the scaled kernel support.
//!
//! The quadrature weights w_q = gl_w(q)·η(y_q) are renormalized to sum to
//! one, so the discrete convolution is a convex combination of field values:
//! constants are preserved exactly, ‖u_δ‖_∞ ≤ ‖u‖_∞, and exact pointwise
//! divergence-freeness of the base field survives discretization.

use super::kernel::MollifierKernel;
use super::VelocityField;
use crate::error::{Error, Result};
use crate::qmc::MAX_DIM;
use crate::quad::gauss_legendre;
use crate::torus::wrap_unit;

#[derive(Debug, Clone)]
pub struct MollifiedField {
    pub(super) base: Box<VelocityField>,
    delta: f64,
    kernel: MollifierKernel,
    quad_points_per_axis: usize,
    /// Flat q×d quadrature nodes in the unit ball with positive weight.
    nodes: Vec<f64>,
    /// Convex weights, Σ = 1.
    weights: Vec<f64>,
}

impl MollifiedField {
    pub fn new(
        base: VelocityField,
        delta: f64,
        kernel: MollifierKernel,
        quad_points_per_axis: usize,
    ) -> Result<Self> {
        let d = base.dim();
        if kernel.dim() != d {
            return Err(Error::invalid(format!(
                "kernel dimension {} does not match field dimension {d}",
                kernel.dim()
            )));
        }
        if !(delta > 0.0 && delta <= 0.25) {
            return Err(Error::invalid(format!(
                "mollification radius must lie in (0, 1/4], got {delta}"
            )));
        }
        if quad_points_per_axis < 8 {
            return Err(Error::invalid(format!(
                "need ≥ 8 quadrature points per axis, got {quad_points_per_axis}"
            )));
        }
        let (gl_nodes, gl_weights) = gauss_legendre(quad_points_per_axis);
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        let total = quad_points_per_axis.pow(d as u32);
        let mut y = [0.0f64; MAX_DIM];
        for idx in 0..total {
            let mut rest = idx;
            let mut w = 1.0;
            for slot in y.iter_mut().take(d) {
                let i = rest % quad_points_per_axis;
                rest /= quad_points_per_axis;
                *slot = gl_nodes[i];
                w *= gl_weights[i];
            }
            let density = kernel.density(&y[..d]);
            if density > 0.0 {
                nodes.extend_from_slice(&y[..d]);
                weights.push(w * density);
            }
        }
        let mass: f64 = weights.iter().sum();
        if !(mass > 0.0) {
            return Err(Error::invalid("kernel quadrature collected no mass"));
        }
        weights.iter_mut().for_each(|w| *w /= mass);
        Ok(MollifiedField {
            base: Box::new(base),
            delta,
            kernel,
            quad_points_per_axis,
            nodes,
            weights,
        })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn kernel(&self) -> &MollifierKernel {
        &self.kernel
    }

    pub fn quad_points_per_axis(&self) -> usize {
        self.quad_points_per_axis
    }

    pub fn base(&self) -> &VelocityField {
        &self.base
    }

    #[inline]
    pub(super) fn eval_raw(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let d = out.len();
        let mut shifted = [0.0f64; MAX_DIM];
        let mut tmp = [0.0f64; MAX_DIM];
        out.iter_mut().for_each(|o| *o = 0.0);
        for (q, &w) in self.weights.iter().enumerate() {
            let node = &self.nodes[q * d..(q + 1) * d];
            for k in 0..d {
                shifted[k] = wrap_unit(x[k] + self.delta * node[k]);
            }
            self.base.eval_raw(t, &shifted[..d], &mut tmp[..d]);
            for k in 0..d {
                out[k] += w * tmp[k];
            }
        }
    }
}
