//! Grid-sampled velocity fields: periodic multilinear interpolation in
//! space, piecewise-constant in time on sample slabs, with a binary file
//! format for interchange.
//!
//! File layout (all values little-endian 64-bit):
//! magic `LAGF1` (5 bytes), d, N_x per axis (d values), N_t, T, then the
//! samples as f64, time-major, space row-major, d components per node.

use crate::error::{Error, Result};
use crate::qmc::MAX_DIM;
use std::io::{Read, Write};
use std::path::Path;

pub const GRID_MAGIC: &[u8; 5] = b"LAGF1";

#[derive(Debug, Clone)]
pub struct GridField {
    dims: Vec<usize>,
    n_t: usize,
    /// Time horizon T; `f64::INFINITY` for in-memory autonomous fields.
    t_max: f64,
    /// `[t][node row-major][component]`.
    data: Vec<f64>,
    /// Max node norm; the interpolant never exceeds it (convexity), and
    /// evaluation clamps to it as a final guard.
    sup_norm: f64,
}

impl GridField {
    pub fn from_samples(dims: Vec<usize>, n_t: usize, t_max: f64, data: Vec<f64>) -> Result<Self> {
        let d = dims.len();
        if d == 0 || d > MAX_DIM {
            return Err(Error::invalid(format!("grid dimension {d} out of range")));
        }
        if dims.iter().any(|&n| n < 2) {
            return Err(Error::invalid("grid needs ≥ 2 nodes per axis"));
        }
        if n_t == 0 {
            return Err(Error::invalid("grid needs ≥ 1 time slab"));
        }
        if !(t_max > 0.0) {
            return Err(Error::invalid("grid horizon must be positive"));
        }
        let nodes: usize = dims.iter().product();
        if data.len() != n_t * nodes * d {
            return Err(Error::invalid(format!(
                "grid data length {} != n_t·nodes·d = {}",
                data.len(),
                n_t * nodes * d
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("grid samples must be finite"));
        }
        let mut sup: f64 = 0.0;
        for node in data.chunks_exact(d) {
            sup = sup.max(node.iter().map(|c| c * c).sum::<f64>().sqrt());
        }
        Ok(GridField {
            dims,
            n_t,
            t_max,
            data,
            sup_norm: sup,
        })
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn n_t(&self) -> usize {
        self.n_t
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn sup_norm(&self) -> f64 {
        self.sup_norm
    }

    /// Node value at integer indices (no interpolation).
    pub fn node(&self, t_idx: usize, idx: &[usize]) -> &[f64] {
        let d = self.dim();
        let mut flat = 0;
        for (k, &i) in idx.iter().enumerate() {
            flat = flat * self.dims[k] + i;
        }
        let nodes: usize = self.dims.iter().product();
        let base = (t_idx * nodes + flat) * d;
        &self.data[base..base + d]
    }

    /// Multilinear periodic interpolation; `x` must lie in [0,1)^d.
    #[inline]
    pub fn eval_raw(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        debug_assert_eq!(x.len(), d);
        let slab = if self.n_t == 1 {
            0
        } else {
            let s = (t / self.t_max * self.n_t as f64).floor();
            (s.max(0.0) as usize).min(self.n_t - 1)
        };
        let nodes: usize = self.dims.iter().product();
        let slab_base = slab * nodes * d;

        let mut lo = [0usize; MAX_DIM];
        let mut frac = [0.0f64; MAX_DIM];
        for k in 0..d {
            let s = x[k] * self.dims[k] as f64;
            let i = s.floor();
            lo[k] = (i as usize).min(self.dims[k] - 1);
            frac[k] = s - i;
        }

        out.iter_mut().for_each(|o| *o = 0.0);
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut flat = 0;
            for k in 0..d {
                let hi = (corner >> k) & 1 == 1;
                w *= if hi { frac[k] } else { 1.0 - frac[k] };
                let idx = if hi {
                    let j = lo[k] + 1;
                    if j == self.dims[k] {
                        0
                    } else {
                        j
                    }
                } else {
                    lo[k]
                };
                flat = flat * self.dims[k] + idx;
            }
            // Skipping zero weights keeps node evaluations bitwise equal to
            // the stored samples.
            if w == 0.0 {
                continue;
            }
            let base = slab_base + flat * d;
            for c in 0..d.min(out.len()) {
                out[c] += w * self.data[base + c];
            }
        }

        let norm: f64 = out.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm > self.sup_norm * (1.0 + 1e-12) && norm > 0.0 {
            let scale = self.sup_norm / norm;
            out.iter_mut().for_each(|c| *c *= scale);
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(GRID_MAGIC)?;
        w.write_all(&(self.dim() as u64).to_le_bytes())?;
        for &n in &self.dims {
            w.write_all(&(n as u64).to_le_bytes())?;
        }
        w.write_all(&(self.n_t as u64).to_le_bytes())?;
        w.write_all(&self.t_max.to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic).map_err(|e| bad_format(&e))?;
        if &magic != GRID_MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                magic, GRID_MAGIC
            )));
        }
        let d = read_u64(r)? as usize;
        if d == 0 || d > MAX_DIM {
            return Err(Error::Format(format!("grid dimension {d} out of range")));
        }
        let mut dims = Vec::with_capacity(d);
        for _ in 0..d {
            dims.push(read_u64(r)? as usize);
        }
        let n_t = read_u64(r)? as usize;
        let t_max = read_f64(r)?;
        let nodes: usize = dims.iter().product();
        let count = n_t
            .checked_mul(nodes)
            .and_then(|n| n.checked_mul(d))
            .ok_or_else(|| Error::Format("grid size overflow".into()))?;
        if count > 100_000_000 {
            return Err(Error::Format(format!("grid too large: {count} samples")));
        }
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(read_f64(r)?);
        }
        // Trailing bytes indicate a corrupt or mismatched file.
        let mut extra = [0u8; 1];
        match r.read(&mut extra)? {
            0 => {}
            _ => return Err(Error::Format("trailing bytes after grid data".into())),
        }
        GridField::from_samples(dims, n_t, t_max, data)
            .map_err(|e| Error::Format(format!("invalid grid file: {e}")))
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

fn bad_format(e: &std::io::Error) -> Error {
    Error::Format(format!("truncated grid file: {e}"))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| bad_format(&e))?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| bad_format(&e))?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_field() -> GridField {
        // 4×4 grid, 2 time slabs, d=2: value = (i + 10j + 100t, 0.5).
        let n = 4;
        let mut data = Vec::new();
        for t in 0..2 {
            for i in 0..n {
                for j in 0..n {
                    data.push((i + 10 * j + 100 * t) as f64);
                    data.push(0.5);
                }
            }
        }
        GridField::from_samples(vec![n, n], 2, 1.0, data).unwrap()
    }

    #[test]
    fn node_evaluation_is_bitwise() {
        let g = sample_field();
        let mut out = [0.0; 2];
        for i in 0..4 {
            for j in 0..4 {
                let x = [i as f64 / 4.0, j as f64 / 4.0];
                g.eval_raw(0.0, &x, &mut out);
                let stored = g.node(0, &[i, j]);
                assert_eq!(out[0].to_bits(), stored[0].to_bits());
                assert_eq!(out[1].to_bits(), stored[1].to_bits());
            }
        }
    }

    #[test]
    fn interpolation_is_multilinear() {
        let g = sample_field();
        let mut out = [0.0; 2];
        // Midpoint of a cell: average of the 4 corners.
        g.eval_raw(0.0, &[0.125, 0.125], &mut out);
        let avg = (0.0 + 1.0 + 10.0 + 11.0) / 4.0;
        assert!((out[0] - avg).abs() < 1e-12);
    }

    #[test]
    fn periodic_wraparound_interpolation() {
        let g = sample_field();
        let mut out = [0.0; 2];
        // x₁ between node 3 and node 0 (wrap).
        g.eval_raw(0.0, &[0.875, 0.0], &mut out);
        let expect = 0.5 * 3.0 + 0.5 * 0.0;
        assert!((out[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn time_slabs_piecewise_constant() {
        let g = sample_field();
        let mut a = [0.0; 2];
        let mut b = [0.0; 2];
        g.eval_raw(0.1, &[0.3, 0.3], &mut a);
        g.eval_raw(0.49, &[0.3, 0.3], &mut b);
        assert_eq!(a, b);
        g.eval_raw(0.51, &[0.3, 0.3], &mut b);
        assert!((b[0] - a[0] - 100.0).abs() < 1e-9);
        // t = T falls in the last slab.
        g.eval_raw(1.0, &[0.3, 0.3], &mut b);
        assert!((b[0] - a[0] - 100.0).abs() < 1e-9);
    }

    #[test]
    fn roundtrip_bitwise() {
        let g = sample_field();
        let mut buf = Vec::new();
        g.write_to(&mut buf).unwrap();
        let h = GridField::read_from(&mut &buf[..]).unwrap();
        assert_eq!(g.dims, h.dims);
        assert_eq!(g.n_t, h.n_t);
        assert_eq!(g.t_max.to_bits(), h.t_max.to_bits());
        assert_eq!(g.data.len(), h.data.len());
        for (a, b) in g.data.iter().zip(h.data.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_corrupt_files() {
        let g = sample_field();
        let mut buf = Vec::new();
        g.write_to(&mut buf).unwrap();

        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(GridField::read_from(&mut &bad_magic[..]).is_err());

        let truncated = &buf[..buf.len() - 3];
        assert!(GridField::read_from(&mut &truncated[..]).is_err());

        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(GridField::read_from(&mut &trailing[..]).is_err());
    }
}
