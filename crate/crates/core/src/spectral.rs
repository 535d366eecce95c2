//! Periodic box and 3-D complex FFTs along the axes of a row-major cell array.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::{num_complex::Complex64, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Periodic box with `n[a]` cells of width `length[a]/n[a]`; cell index (ix·ny + iy)·nz + iz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub n: [usize; 3],
    pub length: [f64; 3],
}

impl Domain {
    pub fn new(n: [usize; 3], length: [f64; 3]) -> Result<Self> {
        if n.iter().any(|&k| k == 0) {
            return Err(Error::InvalidParameter(format!("spatial resolution {n:?}")));
        }
        if length.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::InvalidParameter(format!("box size {length:?}")));
        }
        Ok(Domain { n, length })
    }

    /// 2π-periodic box, z-invariant when `nz = 1`.
    pub fn torus(nx: usize, ny: usize, nz: usize) -> Result<Self> {
        Domain::new([nx, ny, nz], [2.0 * PI; 3])
    }

    pub fn cells(&self) -> usize {
        self.n[0] * self.n[1] * self.n[2]
    }
    pub fn dx(&self, axis: usize) -> f64 {
        self.length[axis] / self.n[axis] as f64
    }
    pub fn min_dx(&self) -> f64 {
        (0..3)
            .filter(|&a| self.n[a] > 1)
            .map(|a| self.dx(a))
            .fold(f64::INFINITY, f64::min)
    }
    pub fn volume(&self) -> f64 {
        self.length.iter().product()
    }
    pub fn cell_volume(&self) -> f64 {
        self.volume() / self.cells() as f64
    }
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.n[1] + iy) * self.n[2] + iz
    }
    pub fn indices(&self, cell: usize) -> [usize; 3] {
        let iz = cell % self.n[2];
        let iy = (cell / self.n[2]) % self.n[1];
        [cell / (self.n[1] * self.n[2]), iy, iz]
    }
    /// Cell position (left corner convention, x = i·Δx).
    pub fn coords(&self, cell: usize) -> [f64; 3] {
        let id = self.indices(cell);
        [0, 1, 2].map(|a| id[a] as f64 * self.dx(a))
    }

    /// Signed wavenumbers in FFT order for one axis.
    pub fn wavenumbers(&self, axis: usize) -> Vec<f64> {
        let n = self.n[axis];
        let k0 = 2.0 * PI / self.length[axis];
        (0..n)
            .map(|m| {
                let s = if m <= n / 2 { m as f64 } else { m as f64 - n as f64 };
                k0 * s
            })
            .collect()
    }

    /// Wavenumbers with the unpaired Nyquist mode set to zero, as used for derivatives.
    pub fn derivative_wavenumbers(&self, axis: usize) -> Vec<f64> {
        let n = self.n[axis];
        let mut k = self.wavenumbers(axis);
        if n % 2 == 0 {
            k[n / 2] = 0.0;
        }
        k
    }

    /// Sample a function of position on the cells.
    pub fn eval<F: Fn([f64; 3]) -> f64>(&self, f: F) -> Vec<f64> {
        (0..self.cells()).map(|c| f(self.coords(c))).collect()
    }

    /// ∫ f dx.
    pub fn integrate(&self, f: &[f64]) -> f64 {
        f.iter().sum::<f64>() * self.cell_volume()
    }
    pub fn l2_norm(&self, f: &[f64]) -> f64 {
        (f.iter().map(|x| x * x).sum::<f64>() * self.cell_volume()).sqrt()
    }
    pub fn l1_norm(&self, f: &[f64]) -> f64 {
        f.iter().map(|x| x.abs()).sum::<f64>() * self.cell_volume()
    }
}

/// Plans for the three axes of a `Domain`.
#[derive(Clone)]
pub struct Fft3 {
    domain: Domain,
    fwd: [Arc<dyn Fft<f64>>; 3],
    inv: [Arc<dyn Fft<f64>>; 3],
}

impl std::fmt::Debug for Fft3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft3").field("domain", &self.domain).finish()
    }
}

impl Fft3 {
    pub fn new(domain: Domain) -> Self {
        let mut planner = FftPlanner::new();
        let fwd = [0, 1, 2].map(|a| planner.plan_fft_forward(domain.n[a]));
        let inv = [0, 1, 2].map(|a| planner.plan_fft_inverse(domain.n[a]));
        Fft3 { domain, fwd, inv }
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn forward(&self, data: &mut [Complex64]) {
        self.transform(data, &self.fwd);
    }

    /// Inverse transform including the 1/N normalization.
    pub fn inverse(&self, data: &mut [Complex64]) {
        self.transform(data, &self.inv);
        let s = 1.0 / self.domain.cells() as f64;
        data.iter_mut().for_each(|z| *z *= s);
    }

    pub fn forward_real(&self, f: &[f64]) -> Vec<Complex64> {
        let mut z: Vec<Complex64> = f.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.forward(&mut z);
        z
    }

    pub fn inverse_real(&self, mut z: Vec<Complex64>) -> Vec<f64> {
        self.inverse(&mut z);
        z.into_iter().map(|c| c.re).collect()
    }

    fn transform(&self, data: &mut [Complex64], plans: &[Arc<dyn Fft<f64>>; 3]) {
        let [nx, ny, nz] = self.domain.n;
        debug_assert_eq!(data.len(), nx * ny * nz);
        if nz > 1 {
            plans[2].process(data);
        }
        let mut line = Vec::new();
        if ny > 1 {
            line.resize(ny, Complex64::default());
            for ix in 0..nx {
                for iz in 0..nz {
                    let base = ix * ny * nz + iz;
                    for (iy, l) in line.iter_mut().enumerate() {
                        *l = data[base + iy * nz];
                    }
                    plans[1].process(&mut line);
                    for (iy, l) in line.iter().enumerate() {
                        data[base + iy * nz] = *l;
                    }
                }
            }
        }
        if nx > 1 {
            line.resize(nx, Complex64::default());
            let stride = ny * nz;
            for off in 0..stride {
                for (ix, l) in line.iter_mut().enumerate() {
                    *l = data[off + ix * stride];
                }
                plans[0].process(&mut line);
                for (ix, l) in line.iter().enumerate() {
                    data[off + ix * stride] = *l;
                }
            }
        }
    }
}

/// Fourier resampling between two resolutions of the same box. Modes resolved on
/// both grids are kept; unpaired Nyquist modes are dropped.
pub fn resample(from: &Domain, f: &[f64], to: &Domain) -> Result<Vec<f64>> {
    if from.length != to.length {
        return Err(Error::InvalidParameter("resampling needs equal box sizes".into()));
    }
    if f.len() != from.cells() {
        return Err(Error::InvalidParameter("field does not match the source grid".into()));
    }
    if from.n == to.n {
        return Ok(f.to_vec());
    }
    let src = Fft3::new(*from).forward_real(f);
    let scale = to.cells() as f64 / from.cells() as f64;
    let map = |i: usize, a: usize| -> Option<usize> {
        let (nt, nf) = (to.n[a], from.n[a]);
        let s = if i <= nt / 2 { i as i64 } else { i as i64 - nt as i64 };
        let keep = |n: usize| n % 2 == 1 || s.unsigned_abs() as usize * 2 < n;
        if s != 0 && !(keep(nt) && keep(nf)) {
            return None;
        }
        Some(s.rem_euclid(nf as i64) as usize)
    };
    let mut z = vec![Complex64::default(); to.cells()];
    for (c, zc) in z.iter_mut().enumerate() {
        let id = to.indices(c);
        if let (Some(a), Some(b), Some(d)) = (map(id[0], 0), map(id[1], 1), map(id[2], 2)) {
            *zc = src[from.index(a, b, d)] * scale;
        }
    }
    Ok(Fft3::new(*to).inverse_real(z))
}
