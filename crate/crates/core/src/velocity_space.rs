//! Velocity lattice with Gaussian-measure weights, sphere rule for ω, and the
//! hydrodynamic projection onto span{1, v, |v|²}.
//!
//! All grid functions are values relative to the reference Maxwellian
//! M(v) = (2π)^{-3/2} exp(-|v|²/2), so `bracket(φ)` approximates ∫ φ M dv.

use std::f64::consts::PI;
use std::num::NonZeroUsize;

use gauss_quad::hermite::GaussHermite;
use gauss_quad::laguerre::GaussLaguerre;
use gauss_quad::legendre::GaussLegendre;
use gauss_quad::FiniteAboveNegOneF64;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type GridFunction = Vec<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadratureKind {
    GaussHermite,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub n_per_axis: usize,
    pub v_max: f64,
    pub sphere_order: usize,
    pub quadrature_kind: QuadratureKind,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            n_per_axis: 12,
            v_max: 6.0,
            sphere_order: 6,
            quadrature_kind: QuadratureKind::GaussHermite,
        }
    }
}

impl GridSpec {
    pub fn uniform(n_per_axis: usize, v_max: f64) -> Self {
        GridSpec {
            n_per_axis,
            v_max,
            sphere_order: 6,
            quadrature_kind: QuadratureKind::Uniform,
        }
    }

    pub fn gauss_hermite(n_per_axis: usize) -> Self {
        GridSpec {
            n_per_axis,
            ..GridSpec::default()
        }
    }
}

/// Coefficients of the infinitesimal Maxwellian ρ + u·v + θ·½(|v|²−3).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct InfinitesimalMaxwellian {
    pub rho: f64,
    pub u: [f64; 3],
    pub theta: f64,
}

pub type HydroPoint = InfinitesimalMaxwellian;

impl InfinitesimalMaxwellian {
    pub fn eval(&self, v: [f64; 3]) -> f64 {
        let v2 = dot(v, v);
        self.rho + dot(self.u, v) + self.theta * 0.5 * (v2 - 3.0)
    }
}

#[derive(Debug, Clone)]
pub struct VelocityGrid {
    spec: GridSpec,
    axis_nodes: Vec<f64>,
    axis_weights: Vec<f64>,
    nodes: Vec<[f64; 3]>,
    weights: Vec<f64>,
    sphere_nodes: Vec<[f64; 3]>,
    sphere_weights: Vec<f64>,
    degree: usize,
}

/// Build a tensor Gauss–Hermite grid (the default quadrature).
pub fn build_grid(n_per_axis: usize, v_max: f64, sphere_order: usize) -> Result<VelocityGrid> {
    VelocityGrid::new(&GridSpec {
        n_per_axis,
        v_max,
        sphere_order,
        quadrature_kind: QuadratureKind::GaussHermite,
    })
}

impl VelocityGrid {
    pub fn new(spec: &GridSpec) -> Result<Self> {
        let n = spec.n_per_axis;
        if n < 4 {
            return Err(Error::InvalidGrid(format!("n_per_axis = {n} < 4")));
        }
        if !(spec.v_max > 0.0) || !spec.v_max.is_finite() {
            return Err(Error::InvalidGrid(format!("v_max = {} must be positive", spec.v_max)));
        }
        if spec.sphere_order == 0 || spec.sphere_order > 64 {
            return Err(Error::InvalidGrid(format!(
                "sphere_order = {} outside 1..=64",
                spec.sphere_order
            )));
        }
        let (axis_nodes, axis_weights, degree) = match spec.quadrature_kind {
            QuadratureKind::GaussHermite => {
                let (x, w) = gauss_hermite_rule(n);
                (x, w, 2 * n - 1)
            }
            QuadratureKind::Uniform => uniform_rule(n, spec.v_max)?,
        };
        if let Some((i, w)) = axis_weights.iter().enumerate().find(|(_, w)| !(**w > 0.0)) {
            return Err(Error::InvalidGrid(format!("axis weight {i} = {w:e} is not positive")));
        }
        let mass: f64 = axis_weights.iter().sum();
        if (mass - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidGrid(format!("unit-mass defect {:e}", mass - 1.0)));
        }

        let mut nodes = Vec::with_capacity(n * n * n);
        let mut weights = Vec::with_capacity(n * n * n);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    nodes.push([axis_nodes[i], axis_nodes[j], axis_nodes[k]]);
                    weights.push(axis_weights[i] * axis_weights[j] * axis_weights[k]);
                }
            }
        }
        let (sphere_nodes, sphere_weights) = sphere_rule(spec.sphere_order);
        Ok(VelocityGrid {
            spec: spec.clone(),
            axis_nodes,
            axis_weights,
            nodes,
            weights,
            sphere_nodes,
            sphere_weights,
            degree,
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }
    pub fn len(&self) -> usize {
        self.nodes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
    pub fn n_per_axis(&self) -> usize {
        self.spec.n_per_axis
    }
    pub fn nodes(&self) -> &[[f64; 3]] {
        &self.nodes
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn axis_nodes(&self) -> &[f64] {
        &self.axis_nodes
    }
    pub fn axis_weights(&self) -> &[f64] {
        &self.axis_weights
    }
    pub fn sphere_nodes(&self) -> &[[f64; 3]] {
        &self.sphere_nodes
    }
    pub fn sphere_weights(&self) -> &[f64] {
        &self.sphere_weights
    }
    /// Polynomial degree integrated exactly along each axis.
    pub fn degree(&self) -> usize {
        self.degree
    }
    pub fn is_uniform(&self) -> bool {
        self.spec.quadrature_kind == QuadratureKind::Uniform
    }
    /// Lattice spacing of a uniform grid.
    pub fn spacing(&self) -> Option<f64> {
        self.is_uniform()
            .then(|| 2.0 * self.spec.v_max / self.spec.n_per_axis as f64)
    }
    /// Largest node speed along one axis.
    pub fn max_axis_speed(&self) -> f64 {
        self.axis_nodes.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        let n = self.spec.n_per_axis;
        (i * n + j) * n + k
    }

    pub fn axis_indices(&self, idx: usize) -> [usize; 3] {
        let n = self.spec.n_per_axis;
        [idx / (n * n), (idx / n) % n, idx % n]
    }

    pub fn eval<F: Fn([f64; 3]) -> f64>(&self, f: F) -> GridFunction {
        self.nodes.iter().map(|&v| f(v)).collect()
    }

    pub fn bracket(&self, phi: &[f64]) -> f64 {
        debug_assert_eq!(phi.len(), self.len());
        phi.iter().zip(&self.weights).map(|(p, w)| p * w).sum()
    }

    /// ⟨φψ⟩
    pub fn inner(&self, phi: &[f64], psi: &[f64]) -> f64 {
        phi.iter()
            .zip(psi)
            .zip(&self.weights)
            .map(|((a, b), w)| a * b * w)
            .sum()
    }

    pub fn norm(&self, phi: &[f64]) -> f64 {
        self.inner(phi, phi).sqrt()
    }

    pub fn moments(&self, g: &[f64]) -> HydroPoint {
        let mut m = InfinitesimalMaxwellian::default();
        for ((v, w), gi) in self.nodes.iter().zip(&self.weights).zip(g) {
            let wg = w * gi;
            m.rho += wg;
            m.u[0] += v[0] * wg;
            m.u[1] += v[1] * wg;
            m.u[2] += v[2] * wg;
            m.theta += (dot(*v, *v) / 3.0 - 1.0) * wg;
        }
        m
    }

    pub fn reconstruct(&self, m: &InfinitesimalMaxwellian) -> GridFunction {
        self.eval(|v| m.eval(v))
    }

    /// Coefficients and reconstruction of Πg.
    pub fn project_hydro(&self, g: &[f64]) -> (InfinitesimalMaxwellian, GridFunction) {
        let m = self.moments(g);
        let pg = self.reconstruct(&m);
        (m, pg)
    }

    /// {1, v₁, v₂, v₃, |v|²} orthonormalized in the discrete inner product.
    pub fn kernel_basis(&self) -> Vec<GridFunction> {
        let raw = vec![
            self.eval(|_| 1.0),
            self.eval(|v| v[0]),
            self.eval(|v| v[1]),
            self.eval(|v| v[2]),
            self.eval(|v| dot(v, v)),
        ];
        orthonormalize(self, raw)
    }

    /// Π by the discrete orthogonal projection on `kernel_basis`.
    pub fn project_kernel(&self, basis: &[GridFunction], f: &[f64]) -> GridFunction {
        let mut out = vec![0.0; f.len()];
        for e in basis {
            let c = self.inner(e, f);
            for (o, ei) in out.iter_mut().zip(e) {
                *o += c * ei;
            }
        }
        out
    }

    /// Absolute density M_{R,U,Θ} at the nodes.
    pub fn maxwellian(&self, r: f64, u: [f64; 3], theta: f64) -> Result<GridFunction> {
        if !(theta > 0.0) {
            return Err(Error::InvalidParameter(format!("temperature {theta} must be positive")));
        }
        if r < 0.0 {
            return Err(Error::InvalidParameter(format!("density {r} must be nonnegative")));
        }
        Ok(self.eval(|v| maxwellian_density(r, u, theta, v)))
    }

    /// M_{R,U,Θ}/M at the nodes.
    pub fn maxwellian_relative(&self, r: f64, u: [f64; 3], theta: f64) -> Result<GridFunction> {
        if !(theta > 0.0) {
            return Err(Error::InvalidParameter(format!("temperature {theta} must be positive")));
        }
        Ok(self.eval(|v| relative_maxwellian(r, u, theta, v)))
    }

    /// Trilinear interpolation stencil (node index, weight) for a point of a uniform lattice.
    pub fn trilinear_weights(&self, v: [f64; 3]) -> Result<[(usize, f64); 8]> {
        let h = self.spacing().ok_or(Error::NeedsUniformGrid)?;
        let n = self.spec.n_per_axis;
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let s = (v[a] + self.spec.v_max) / h - 0.5;
            if !(s >= 0.0 && s <= (n - 1) as f64) {
                return Err(Error::OffGrid(v));
            }
            let i0 = (s.floor() as usize).min(n - 2);
            base[a] = i0;
            frac[a] = s - i0 as f64;
        }
        let mut out = [(0usize, 0.0); 8];
        for (c, slot) in out.iter_mut().enumerate() {
            let bits = [(c >> 2) & 1, (c >> 1) & 1, c & 1];
            let mut w = 1.0;
            for a in 0..3 {
                w *= if bits[a] == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            *slot = (
                self.index(base[0] + bits[0], base[1] + bits[1], base[2] + bits[2]),
                w,
            );
        }
        Ok(out)
    }
}

pub fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn reference_maxwellian(v: [f64; 3]) -> f64 {
    (2.0 * PI).powf(-1.5) * (-0.5 * dot(v, v)).exp()
}

pub fn maxwellian_density(r: f64, u: [f64; 3], theta: f64, v: [f64; 3]) -> f64 {
    let d = [v[0] - u[0], v[1] - u[1], v[2] - u[2]];
    r / (2.0 * PI * theta).powf(1.5) * (-dot(d, d) / (2.0 * theta)).exp()
}

pub fn relative_maxwellian(r: f64, u: [f64; 3], theta: f64, v: [f64; 3]) -> f64 {
    let d = [v[0] - u[0], v[1] - u[1], v[2] - u[2]];
    r * theta.powf(-1.5) * (0.5 * dot(v, v) - dot(d, d) / (2.0 * theta)).exp()
}

fn orthonormalize(grid: &VelocityGrid, mut vecs: Vec<GridFunction>) -> Vec<GridFunction> {
    let mut out: Vec<GridFunction> = Vec::with_capacity(vecs.len());
    for mut v in vecs.drain(..) {
        for _ in 0..2 {
            for e in &out {
                let c = grid.inner(e, &v);
                for (vi, ei) in v.iter_mut().zip(e) {
                    *vi -= c * ei;
                }
            }
        }
        let nrm = grid.norm(&v);
        v.iter_mut().for_each(|x| *x /= nrm);
        out.push(v);
    }
    out
}

/// Normalized probabilists' Hermite values h_0..=h_n at x (h_k = He_k/√k!).
fn hermite_normalized(n: usize, x: f64) -> Vec<f64> {
    let mut h = vec![0.0; n + 1];
    h[0] = 1.0;
    if n >= 1 {
        h[1] = x;
    }
    for k in 1..n {
        h[k + 1] = (x * h[k] - (k as f64).sqrt() * h[k - 1]) / ((k + 1) as f64).sqrt();
    }
    h
}

/// n-point Gauss–Hermite rule for the unit Gaussian measure.
fn gauss_hermite_rule(n: usize) -> (Vec<f64>, Vec<f64>) {
    let rule = GaussHermite::new(NonZeroUsize::new(n).expect("n >= 4"));
    let mut x: Vec<f64> = rule.nodes().map(|&t| t * 2f64.sqrt()).collect();
    x.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let nf = n as f64;
    let mut w = Vec::with_capacity(n);
    for xi in x.iter_mut() {
        for _ in 0..3 {
            let h = hermite_normalized(n, *xi);
            let step = h[n] / (nf.sqrt() * h[n - 1]);
            *xi -= step;
        }
        let h = hermite_normalized(n, *xi);
        w.push(1.0 / (nf * h[n - 1] * h[n - 1]));
    }
    // symmetrize against round-off
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let xs = 0.5 * (x[j] - x[i]);
        let ws = 0.5 * (w[i] + w[j]);
        x[i] = -xs;
        x[j] = xs;
        w[i] = ws;
        w[j] = ws;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|wi| *wi /= s);
    (x, w)
}

/// Cell-centred uniform nodes on [−v_max, v_max] with Gaussian weights corrected by an
/// even Hermite polynomial so that the low even moments are exact. The number of
/// matched moments is the largest (at most five) that keeps every weight positive.
fn uniform_rule(n: usize, v_max: f64) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let h = 2.0 * v_max / n as f64;
    let x: Vec<f64> = (0..n).map(|i| -v_max + (i as f64 + 0.5) * h).collect();
    let base: Vec<f64> = x
        .iter()
        .map(|&xi| (-0.5 * xi * xi).exp() / (2.0 * PI).sqrt() * h)
        .collect();
    let distinct = n.div_ceil(2);
    for m in (1..=distinct.min(5)).rev() {
        if let Some(w) = corrected_weights(&x, &base, m) {
            if w.iter().all(|&wi| wi > 0.0) {
                return Ok((x, w, 2 * m - 1));
            }
        }
    }
    Err(Error::InvalidGrid(format!(
        "no positive moment-corrected weights for n = {n}, v_max = {v_max}"
    )))
}

fn corrected_weights(x: &[f64], base: &[f64], m: usize) -> Option<Vec<f64>> {
    let n = x.len();
    let herm: Vec<Vec<f64>> = x.iter().map(|&xi| hermite_normalized(2 * m, xi)).collect();
    let mut a = DMatrix::<f64>::zeros(m, m);
    for r in 0..m {
        for c in 0..m {
            a[(r, c)] = (0..n).map(|i| base[i] * herm[i][2 * r] * herm[i][2 * c]).sum();
        }
    }
    let weights_for = |coef: &DVector<f64>| -> Vec<f64> {
        (0..n)
            .map(|i| base[i] * (1.0 + (0..m).map(|c| coef[c] * herm[i][2 * c]).sum::<f64>()))
            .collect()
    };
    let lu = a.lu();
    let mut coef = DVector::<f64>::zeros(m);
    for _ in 0..3 {
        let w = weights_for(&coef);
        let res = DVector::from_fn(m, |r, _| {
            let target = if r == 0 { 1.0 } else { 0.0 };
            target - (0..n).map(|i| w[i] * herm[i][2 * r]).sum::<f64>()
        });
        coef += lu.solve(&res)?;
    }
    let mut w = weights_for(&coef);
    for i in 0..n / 2 {
        let s = 0.5 * (w[i] + w[n - 1 - i]);
        w[i] = s;
        w[n - 1 - i] = s;
    }
    Some(w)
}

/// Product rule on S²: Gauss–Legendre in cos θ on each hemisphere × trapezoid in φ.
fn sphere_rule(order: usize) -> (Vec<[f64; 3]>, Vec<f64>) {
    let gl = GaussLegendre::new(NonZeroUsize::new(order).expect("order >= 1"));
    let n_phi = 2 * order;
    let dphi = 2.0 * PI / n_phi as f64;
    let mut nodes = Vec::with_capacity(2 * order * n_phi);
    let mut weights = Vec::with_capacity(2 * order * n_phi);
    let mut pairs: Vec<(f64, f64)> = gl.iter().map(|(t, w)| (*t, *w)).collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    for hemi in [-1.0, 1.0] {
        for &(t, wt) in &pairs {
            // map [-1,1] -> [0,1] and reflect for the lower hemisphere
            let c = hemi * 0.5 * (t + 1.0);
            let s = (1.0 - c * c).max(0.0).sqrt();
            for p in 0..n_phi {
                let phi = (p as f64 + 0.5) * dphi;
                nodes.push([s * phi.cos(), s * phi.sin(), c]);
                weights.push(0.5 * wt * dphi);
            }
        }
    }
    (nodes, weights)
}

/// |S^{N-1}| = 2π^{N/2}/Γ(N/2)
pub fn sphere_area(n: usize) -> f64 {
    2.0 * PI.powf(n as f64 / 2.0) / gamma_half(n)
}

/// Γ(n/2) for positive integer n.
fn gamma_half(n: usize) -> f64 {
    let mut g = if n % 2 == 0 { 1.0 } else { PI.sqrt() };
    let mut k = if n % 2 == 0 { 2 } else { 1 };
    while k < n {
        g *= k as f64 / 2.0;
        k += 2;
    }
    g
}

/// Tail integral ∫_{|z|²>R} |z|^p G_N(z) dz and its large-R asymptotic
/// (2π)^{−N/2}|S^{N−1}| R^{(p+N)/2−1} e^{−R/2}.
pub fn gaussian_tail(p: usize, n: usize, r: f64) -> Result<(f64, f64)> {
    if !(r > 0.0) {
        return Err(Error::InvalidParameter(format!("R = {r} must be positive")));
    }
    if n == 0 {
        return Err(Error::InvalidParameter("dimension must be positive".into()));
    }
    let a = (p + n) as f64 / 2.0 - 1.0;
    let pref = (2.0 * PI).powf(-(n as f64) / 2.0) * sphere_area(n);
    // with s = |z|², the tail is ½·pref·∫_R^∞ s^a e^{−s/2} ds; put s = R + 2τ
    let lag = GaussLaguerre::new(NonZeroUsize::new(64).unwrap(), FiniteAboveNegOneF64::default());
    let integral: f64 = lag
        .iter()
        .map(|(tau, w)| w * (1.0 + 2.0 * tau / r).powf(a))
        .sum();
    let asymptotic = pref * r.powf(a) * (-0.5 * r).exp();
    Ok((asymptotic * integral, asymptotic))
}
