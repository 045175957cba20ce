//! Geometry of the flat torus 𝕋^d = ℝ^d/ℤ^d.
//!
//! Points are stored as canonical representatives in [0,1)^d. Displacements
//! use the minimal periodic representative, componentwise in [−1/2, 1/2], and
//! the distance is the Euclidean norm of that representative — the geodesic
//! quotient metric, which never exceeds √d/2.
//!
//! The dimension d is runtime data carried by each value; operations on
//! mismatched dimensions report an error rather than panic.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Wraps a scalar into [0,1). Non-finite inputs propagate as NaN; the checked
/// constructors reject them before calling this.
#[inline]
pub fn wrap_unit(x: f64) -> f64 {
    let w = x - x.floor();
    // x slightly below 0 can round to exactly 1.0 after the shift.
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}

/// Minimal periodic representative of a coordinate difference, in [−1/2, 1/2]
/// with the tie at magnitude 1/2 resolved toward +1/2 so results are
/// bit-reproducible.
#[inline]
pub fn min_image(diff: f64) -> f64 {
    let c = diff - diff.round();
    if c == -0.5 {
        0.5
    } else {
        c
    }
}

/// Periodic Euclidean distance between coordinate slices of equal length.
#[inline]
pub fn periodic_distance_slice(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let c = min_image(y - x);
        s += c * c;
    }
    s.sqrt()
}

/// Wraps every coordinate of a slice into [0,1) in place.
#[inline]
pub fn wrap_slice(coords: &mut [f64]) {
    for c in coords.iter_mut() {
        *c = wrap_unit(*c);
    }
}

/// A point on 𝕋^d. Every coordinate lies in [0,1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TorusPoint {
    coords: Vec<f64>,
}

impl TorusPoint {
    /// Wraps raw coordinates into the fundamental domain.
    pub fn new(raw: Vec<f64>) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::invalid("torus point needs dimension ≥ 1"));
        }
        if raw.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid(format!(
                "torus point coordinates must be finite, got {raw:?}"
            )));
        }
        let mut coords = raw;
        wrap_slice(&mut coords);
        Ok(TorusPoint { coords })
    }

    pub fn from_slice(raw: &[f64]) -> Result<Self> {
        Self::new(raw.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }
}

/// Minimal periodic displacement between two points; componentwise in
/// [−1/2, 1/2].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TorusVector {
    components: Vec<f64>,
}

impl TorusVector {
    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[f64] {
        &self.components
    }

    pub fn norm(&self) -> f64 {
        self.components.iter().map(|c| c * c).sum::<f64>().sqrt()
    }
}

/// Wraps raw coordinates onto the torus; errors on non-finite input.
pub fn wrap(raw: &[f64]) -> Result<TorusPoint> {
    TorusPoint::from_slice(raw)
}

/// Minimal representative of y − x, ties at magnitude 1/2 broken toward +1/2.
pub fn periodic_displacement(x: &TorusPoint, y: &TorusPoint) -> Result<TorusVector> {
    if x.dim() != y.dim() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} vs {}",
            x.dim(),
            y.dim()
        )));
    }
    let components = x
        .coords
        .iter()
        .zip(y.coords.iter())
        .map(|(&a, &b)| min_image(b - a))
        .collect();
    Ok(TorusVector { components })
}

/// Geodesic distance on 𝕋^d; bounded by √d/2.
pub fn periodic_distance(x: &TorusPoint, y: &TorusPoint) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} vs {}",
            x.dim(),
            y.dim()
        )));
    }
    Ok(periodic_distance_slice(x.coords(), y.coords()))
}
