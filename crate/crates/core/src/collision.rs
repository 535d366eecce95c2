//! Collision kernels, the pre/post-collision map, the normalized collision measure μ and
//! the bilinear collision integral.
//!
//! On a uniform lattice μ is realized by a conservative discrete-velocity table: for each
//! ordered node pair (v, v₁) the admissible post-collision pairs are the lattice points on
//! the collision sphere, i.e. index offsets q with |q|² = |g|², q ≡ g (mod 2), g = p − p₁,
//! whose endpoints stay inside the box. Every admissible q carries the same share of the
//! angular cross-section. This makes the table exactly invariant under (v,v₁) ↔ (v₁,v) and
//! (v,v₁) ↔ (v′,v₁′), so the discrete operator conserves mass, momentum and energy exactly,
//! L is exactly symmetric with a five-dimensional kernel, and Q(f,f) = ½L(f²) holds on the
//! kernel. The pair weights use the pure Gaussian w̃ ∝ exp(−|v|²/2)h³ because
//! w̃(v)w̃(v₁) = w̃(v′)w̃(v₁′) on every event.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{Matrix5, Vector5};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::velocity_space::{dot, reference_maxwellian, GridFunction, GridSpec, VelocityGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    HardSphere,
    CutoffPowerLaw,
    /// Relaxation surrogate with L = a(I − Π); not a Boltzmann kernel.
    ConstantFrequency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub kind: KernelKind,
    #[serde(default)]
    pub beta: f64,
    /// Collision rate a of the constant-frequency surrogate; scales the operator.
    #[serde(default = "one")]
    pub frequency: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sphere_order: Option<usize>,
}

fn one() -> f64 {
    1.0
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec {
            kind: KernelKind::HardSphere,
            beta: 0.0,
            frequency: 1.0,
            sphere_order: None,
        }
    }
}

impl KernelSpec {
    pub fn hard_sphere() -> Self {
        KernelSpec::default()
    }
    pub fn power_law(beta: f64) -> Self {
        KernelSpec {
            kind: KernelKind::CutoffPowerLaw,
            beta,
            ..KernelSpec::default()
        }
    }
    pub fn constant_frequency(a: f64) -> Self {
        KernelSpec {
            kind: KernelKind::ConstantFrequency,
            frequency: a,
            ..KernelSpec::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionKernel {
    pub kind: KernelKind,
    pub beta: f64,
    /// Grad bound constant measured on sampled (z, ω); diagnostic only.
    pub c_b: f64,
    /// Z such that ∫∫∫ b/Z M M₁ dv dv₁ dω = 1.
    pub mu_norm: f64,
    /// Overall collision rate multiplying the μ-normalized operator (a for the surrogate).
    pub rate: f64,
}

impl CollisionKernel {
    pub fn new(spec: &KernelSpec) -> Result<Self> {
        let beta = match spec.kind {
            KernelKind::HardSphere => 1.0,
            KernelKind::CutoffPowerLaw => {
                if !(0.0..=1.0).contains(&spec.beta) {
                    return Err(Error::InvalidParameter(format!(
                        "power-law exponent {} outside [0, 1]",
                        spec.beta
                    )));
                }
                spec.beta
            }
            KernelKind::ConstantFrequency => 0.0,
        };
        let rate = match spec.kind {
            KernelKind::ConstantFrequency => {
                if !(spec.frequency > 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "collision frequency {} must be positive",
                        spec.frequency
                    )));
                }
                spec.frequency
            }
            _ => 1.0,
        };
        let mut k = CollisionKernel {
            kind: spec.kind,
            beta,
            c_b: 1.0,
            mu_norm: 1.0,
            rate,
        };
        k.c_b = measure_bound_constant(&k);
        Ok(k)
    }

    /// Unnormalized b(z, ω).
    pub fn raw(&self, z: [f64; 3], omega: [f64; 3]) -> f64 {
        let zn = dot(z, z).sqrt();
        match self.kind {
            KernelKind::HardSphere => dot(z, omega).abs(),
            KernelKind::CutoffPowerLaw => {
                if zn == 0.0 {
                    return 0.0;
                }
                (1.0 + zn).powf(self.beta) * (dot(z, omega) / zn).abs()
            }
            KernelKind::ConstantFrequency => 1.0 / (4.0 * PI),
        }
    }

    /// ∫_{S²} b(z, ω) dω for the unnormalized kernel, in closed form.
    pub fn angular_average(&self, z_norm: f64) -> f64 {
        match self.kind {
            KernelKind::HardSphere => 2.0 * PI * z_norm,
            KernelKind::CutoffPowerLaw => {
                if z_norm == 0.0 {
                    0.0
                } else {
                    2.0 * PI * (1.0 + z_norm).powf(self.beta)
                }
            }
            KernelKind::ConstantFrequency => 1.0,
        }
    }

    pub fn is_surrogate(&self) -> bool {
        self.kind == KernelKind::ConstantFrequency
    }
}

/// μ-normalized kernel value b(z, ω)/Z.
pub fn kernel_eval(k: &CollisionKernel, z: [f64; 3], omega: [f64; 3]) -> f64 {
    k.raw(z, omega) / k.mu_norm
}

/// Smallest C with b ≤ C(1+|z|)^β|cos| and ∫b dω ≥ |z|/(C(1+|z|)) on a fixed sample set.
fn measure_bound_constant(k: &CollisionKernel) -> f64 {
    if k.is_surrogate() {
        return f64::NAN;
    }
    let mut c: f64 = 0.0;
    for iz in 1..=40 {
        let zn = 0.25 * iz as f64;
        let z = [0.0, 0.0, zn];
        for it in 0..=16 {
            let ct = -1.0 + it as f64 / 8.0;
            let st = (1.0 - ct * ct).max(0.0).sqrt();
            let om = [st, 0.0, ct];
            let denom = (1.0 + zn).powf(k.beta) * ct.abs();
            if denom > 0.0 {
                c = c.max(k.raw(z, om) / denom);
            }
        }
        c = c.max(zn / (1.0 + zn) / k.angular_average(zn));
    }
    c
}

/// v′ = v − ((v−v₁)·ω)ω, v₁′ = v₁ + ((v−v₁)·ω)ω.
pub fn post_collision(v: [f64; 3], v1: [f64; 3], omega: [f64; 3]) -> Result<([f64; 3], [f64; 3])> {
    let n2 = dot(omega, omega);
    if (n2.sqrt() - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidParameter(format!("|ω| = {} is not 1", n2.sqrt())));
    }
    let z = [v[0] - v1[0], v[1] - v1[1], v[2] - v1[2]];
    let s = dot(z, omega);
    let vp = [v[0] - s * omega[0], v[1] - s * omega[1], v[2] - s * omega[2]];
    let v1p = [v1[0] + s * omega[0], v1[1] + s * omega[1], v1[2] + s * omega[2]];
    Ok((vp, v1p))
}

/// Pure Gaussian pair weights normalized to unit mass on the lattice.
fn gaussian_weights(grid: &VelocityGrid) -> Vec<f64> {
    let raw: Vec<f64> = grid.nodes().iter().map(|&v| reference_maxwellian(v)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / s).collect()
}

/// Z = Σ_{v,v₁} w̃ w̃₁ ∫ b dω over the lattice, the ω-integral taken in closed form.
pub fn normalize_mu(k: &CollisionKernel, grid: &VelocityGrid) -> f64 {
    let wt = if grid.is_uniform() {
        gaussian_weights(grid)
    } else {
        grid.weights().to_vec()
    };
    let nodes = grid.nodes();
    let rows: Vec<f64> = (0..nodes.len())
        .into_par_iter()
        .map(|i| {
            let vi = nodes[i];
            let mut s = 0.0;
            for (j, vj) in nodes.iter().enumerate() {
                let z = [vi[0] - vj[0], vi[1] - vj[1], vi[2] - vj[2]];
                s += wt[j] * k.angular_average(dot(z, z).sqrt());
            }
            wt[i] * s
        })
        .collect();
    rows.iter().sum()
}

/// Discrete-velocity realization of μ (see module docs).
#[derive(Debug, Clone)]
pub struct CollisionQuadrature {
    n: usize,
    coords: Vec<[i32; 3]>,
    energy: Vec<f64>,
    pair_weight_base: Vec<f64>,
    class_of: Vec<[u32; 8]>,
    classes: Vec<Vec<[i8; 3]>>,
    class_sigma: Vec<f64>,
    counts: Vec<u16>,
    mu_norm: f64,
    energy_cutoff: Option<f64>,
    by_energy: Vec<u32>,
}

/// One collision event (v_i, v_j) → (v_k, v_l) with its μ-weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub l: usize,
    pub weight: f64,
}

impl CollisionQuadrature {
    pub fn new(kernel: &CollisionKernel, grid: &VelocityGrid) -> Result<Self> {
        let h = grid.spacing().ok_or(Error::NeedsUniformGrid)?;
        let n = grid.n_per_axis();
        if n > 64 {
            return Err(Error::InvalidGrid("collision table supports n_per_axis ≤ 64".into()));
        }
        let coords: Vec<[i32; 3]> = (0..grid.len())
            .map(|idx| {
                let a = grid.axis_indices(idx);
                [a[0] as i32, a[1] as i32, a[2] as i32]
            })
            .collect();
        let energy: Vec<f64> = grid.nodes().iter().map(|&v| dot(v, v)).collect();

        // candidate lists keyed by (|q|², parity of q)
        let r = (n - 1) as i32;
        let m_max = 3 * (n - 1) * (n - 1);
        let mut class_of = vec![[u32::MAX; 8]; m_max + 1];
        let mut classes: Vec<Vec<[i8; 3]>> = Vec::new();
        for qx in -r..=r {
            for qy in -r..=r {
                for qz in -r..=r {
                    let m = (qx * qx + qy * qy + qz * qz) as usize;
                    let par = parity([qx, qy, qz]);
                    let slot = &mut class_of[m][par];
                    if *slot == u32::MAX {
                        *slot = classes.len() as u32;
                        classes.push(Vec::new());
                    }
                    classes[*slot as usize].push([qx as i8, qy as i8, qz as i8]);
                }
            }
        }
        let class_sigma: Vec<f64> = {
            let mut s = vec![0.0; classes.len()];
            for (m, row) in class_of.iter().enumerate() {
                for &c in row.iter().filter(|&&c| c != u32::MAX) {
                    s[c as usize] = kernel.angular_average(h * (m as f64).sqrt());
                }
            }
            s
        };

        let nn = grid.len();
        let counts: Vec<u16> = (0..nn)
            .into_par_iter()
            .flat_map_iter(|i| {
                let coords = &coords;
                let classes = &classes;
                let class_of = &class_of;
                (0..nn).map(move |j| {
                    let (s, c) = pair_class(coords[i], coords[j], class_of);
                    classes[c as usize]
                        .iter()
                        .filter(|q| post_indices(s, **q, n).is_some())
                        .count() as u16
                })
            })
            .collect();

        let wt = gaussian_weights(grid);
        let mut q = CollisionQuadrature {
            n,
            coords,
            energy,
            pair_weight_base: wt,
            class_of,
            classes,
            class_sigma,
            counts,
            mu_norm: 1.0,
            energy_cutoff: None,
            by_energy: Vec::new(),
        };
        q.mu_norm = q.raw_mass();
        let mut order: Vec<u32> = (0..nn as u32).collect();
        order.sort_by(|a, b| {
            q.energy[*a as usize]
                .partial_cmp(&q.energy[*b as usize])
                .unwrap()
                .then(a.cmp(b))
        });
        q.by_energy = order;
        Ok(q)
    }

    /// Drop every pair whose kinetic energy |v|²+|v₁|² exceeds `e_max`. Energy is a
    /// collision invariant, so the pruned table keeps all symmetries.
    pub fn with_energy_cutoff(mut self, e_max: Option<f64>) -> Self {
        self.energy_cutoff = e_max;
        self
    }

    pub fn energy_cutoff(&self) -> Option<f64> {
        self.energy_cutoff
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn mu_norm(&self) -> f64 {
        self.mu_norm
    }

    fn raw_mass(&self) -> f64 {
        let nn = self.len();
        let rows: Vec<f64> = (0..nn)
            .into_par_iter()
            .map(|i| {
                (0..nn)
                    .map(|j| {
                        let (_, c) = pair_class(self.coords[i], self.coords[j], &self.class_of);
                        self.pair_weight_base[j] * self.class_sigma[c as usize]
                    })
                    .sum::<f64>()
                    * self.pair_weight_base[i]
            })
            .collect();
        rows.iter().sum()
    }

    /// Calls `f(j, k, l, weight)` for every event whose first velocity is node `i`.
    #[inline]
    pub fn for_each_from<F: FnMut(usize, usize, usize, f64)>(&self, i: usize, mut f: F) {
        let nn = self.len();
        let ei = self.energy[i];
        let pi = self.coords[i];
        let wi = self.pair_weight_base[i] / self.mu_norm;
        let mut visit = |j: usize| {
            let (s, c) = pair_class(pi, self.coords[j], &self.class_of);
            let cnt = self.counts[i * nn + j];
            let w = wi * self.pair_weight_base[j] * self.class_sigma[c as usize] / cnt as f64;
            if w == 0.0 {
                return;
            }
            for q in &self.classes[c as usize] {
                if let Some((k, l)) = post_indices(s, *q, self.n) {
                    f(j, k, l, w);
                }
            }
        };
        match self.energy_cutoff {
            None => (0..nn).for_each(&mut visit),
            Some(e_max) => {
                for &j in &self.by_energy {
                    if ei + self.energy[j as usize] > e_max {
                        break;
                    }
                    visit(j as usize);
                }
            }
        }
    }

    pub fn events_from(&self, i: usize) -> Vec<Event> {
        let mut out = Vec::new();
        self.for_each_from(i, |j, k, l, weight| out.push(Event { i, j, k, l, weight }));
        out
    }

    /// Σ of all event weights (the discrete μ-mass).
    pub fn total_mass(&self) -> f64 {
        let rows: Vec<f64> = (0..self.len())
            .into_par_iter()
            .map(|i| {
                let mut s = 0.0;
                self.for_each_from(i, |_, _, _, w| s += w);
                s
            })
            .collect();
        rows.iter().sum()
    }

    /// Number of events in the table.
    pub fn event_count(&self) -> usize {
        (0..self.len())
            .into_par_iter()
            .map(|i| {
                let mut c = 0usize;
                self.for_each_from(i, |_, _, _, _| c += 1);
                c
            })
            .sum()
    }

    /// Σ_events W Φ(i, j, k, l); the gather over first index is parallel, the final
    /// reduction runs in node order.
    pub fn sum_events<F>(&self, f: F) -> f64
    where
        F: Fn(usize, usize, usize, usize) -> f64 + Sync,
    {
        let rows: Vec<f64> = (0..self.len())
            .into_par_iter()
            .map(|i| {
                let mut s = 0.0;
                self.for_each_from(i, |j, k, l, w| s += w * f(i, j, k, l));
                s
            })
            .collect();
        rows.iter().sum()
    }

    /// Unit vector along v − v′ for an event (any fixed normal for grazing events).
    pub fn omega(&self, e: &Event) -> [f64; 3] {
        let pi = self.coords[e.i];
        let pk = self.coords[e.k];
        let d = [
            (pi[0] - pk[0]) as f64,
            (pi[1] - pk[1]) as f64,
            (pi[2] - pk[2]) as f64,
        ];
        let nd = dot(d, d).sqrt();
        if nd > 0.0 {
            return [d[0] / nd, d[1] / nd, d[2] / nd];
        }
        let pj = self.coords[e.j];
        let g = [
            (pi[0] - pj[0]) as f64,
            (pi[1] - pj[1]) as f64,
            (pi[2] - pj[2]) as f64,
        ];
        normal_to(g)
    }

    pub fn content_hash(kernel: &KernelSpec, grid: &GridSpec) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(kernel).unwrap_or_default());
        hasher.update(serde_json::to_vec(grid).unwrap_or_default());
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

fn normal_to(g: [f64; 3]) -> [f64; 3] {
    let ng = dot(g, g).sqrt();
    if ng == 0.0 {
        return [0.0, 0.0, 1.0];
    }
    let a = if g[0].abs() <= g[1].abs() && g[0].abs() <= g[2].abs() {
        [1.0, 0.0, 0.0]
    } else if g[1].abs() <= g[2].abs() {
        [0.0, 1.0, 0.0]
    } else {
        [0.0, 0.0, 1.0]
    };
    let c = [
        g[1] * a[2] - g[2] * a[1],
        g[2] * a[0] - g[0] * a[2],
        g[0] * a[1] - g[1] * a[0],
    ];
    let nc = dot(c, c).sqrt();
    [c[0] / nc, c[1] / nc, c[2] / nc]
}

#[inline]
fn parity(q: [i32; 3]) -> usize {
    ((q[0] & 1) as usize) << 2 | ((q[1] & 1) as usize) << 1 | (q[2] & 1) as usize
}

#[inline]
fn pair_class(pi: [i32; 3], pj: [i32; 3], class_of: &[[u32; 8]]) -> ([i32; 3], u32) {
    let g = [pi[0] - pj[0], pi[1] - pj[1], pi[2] - pj[2]];
    let m = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]) as usize;
    let s = [pi[0] + pj[0], pi[1] + pj[1], pi[2] + pj[2]];
    (s, class_of[m][parity(g)])
}

#[inline]
fn post_indices(s: [i32; 3], q: [i8; 3], n: usize) -> Option<(usize, usize)> {
    let ni = n as i32;
    let mut k = 0usize;
    let mut l = 0usize;
    for a in 0..3 {
        let ka = (s[a] + q[a] as i32) >> 1;
        let la = (s[a] - q[a] as i32) >> 1;
        if ka < 0 || la < 0 || ka >= ni || la >= ni {
            return None;
        }
        k = k * n + ka as usize;
        l = l * n + la as usize;
    }
    Some((k, l))
}

/// Discrete Maxwellian exp(c₀ + c·v + c₄|v|²) matching the discrete moments of G.
pub fn discrete_maxwellian(grid: &VelocityGrid, g: &[f64]) -> Result<GridFunction> {
    Ok(fit_maxwellian(grid, g, None)?.1)
}

/// Coefficients c and nodal values of the discrete Maxwellian of G, by Newton's method
/// from `warm` or from the continuous-moment guess.
pub fn fit_maxwellian(
    grid: &VelocityGrid,
    g: &[f64],
    warm: Option<[f64; 5]>,
) -> Result<([f64; 5], GridFunction)> {
    let nodes = grid.nodes();
    let w = grid.weights();
    let feats = |v: [f64; 3]| Vector5::new(1.0, v[0], v[1], v[2], dot(v, v));
    let mut target = Vector5::zeros();
    for ((v, wi), gi) in nodes.iter().zip(w).zip(g) {
        target += feats(*v) * (wi * gi);
    }
    let rho = target[0];
    if !(rho > 0.0) {
        return Err(Error::InvalidParameter(format!("density {rho:e} must be positive")));
    }
    let mut c = match warm {
        Some(c) => Vector5::from(c),
        None => {
            let u = [target[1] / rho, target[2] / rho, target[3] / rho];
            let theta = (target[4] / rho - dot(u, u)) / 3.0;
            if !(theta > 0.0) {
                return Err(Error::InvalidParameter(format!("temperature {theta:e} must be positive")));
            }
            // ln(M_{ρ,u,θ}/M) = ln ρ − 1.5 ln θ − |u|²/(2θ) + (u/θ)·v + (½ − 1/(2θ))|v|²
            Vector5::new(
                rho.ln() - 1.5 * theta.ln() - dot(u, u) / (2.0 * theta),
                u[0] / theta,
                u[1] / theta,
                u[2] / theta,
                0.5 - 0.5 / theta,
            )
        }
    };
    let scale = target.norm();
    let mut converged = false;
    for _ in 0..50 {
        let mut mom = Vector5::zeros();
        let mut jac = Matrix5::zeros();
        for (v, wi) in nodes.iter().zip(w) {
            let f = feats(*v);
            let e = wi * c.dot(&f).exp();
            mom += f * e;
            jac += f * f.transpose() * e;
        }
        let res = target - mom;
        if !res.iter().all(|x| x.is_finite()) {
            break;
        }
        if res.norm() <= 1e-14 * scale {
            converged = true;
            break;
        }
        let step = jac
            .lu()
            .solve(&res)
            .ok_or_else(|| Error::InvalidParameter("singular Maxwellian moment system".into()))?;
        c += step;
        // quadratic convergence: the next residual is below round-off
        if step.norm() <= 1e-10 * (1.0 + c.norm()) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::InvalidParameter("discrete Maxwellian fit did not converge".into()));
    }
    let vals = nodes.iter().map(|&v| c.dot(&feats(v)).exp()).collect();
    Ok(([c[0], c[1], c[2], c[3], c[4]], vals))
}

/// The collision operator on a velocity grid: a discrete-velocity Boltzmann operator, or the
/// constant-frequency relaxation surrogate.
#[derive(Debug, Clone)]
pub struct CollisionOperator {
    kernel: CollisionKernel,
    grid: Arc<VelocityGrid>,
    table: Option<Arc<CollisionQuadrature>>,
    basis: Vec<GridFunction>,
}

impl CollisionOperator {
    pub fn new(spec: &KernelSpec, grid: Arc<VelocityGrid>) -> Result<Self> {
        let mut kernel = CollisionKernel::new(spec)?;
        let table = if grid.is_uniform() {
            Some(Arc::new(CollisionQuadrature::new(&kernel, &grid)?))
        } else if kernel.is_surrogate() {
            None
        } else {
            return Err(Error::NeedsUniformGrid);
        };
        kernel.mu_norm = match &table {
            Some(t) => t.mu_norm(),
            None => 1.0,
        };
        if !(kernel.mu_norm > 0.0) {
            return Err(Error::InvalidGrid(format!("μ-normalization Z = {}", kernel.mu_norm)));
        }
        let basis = grid.kernel_basis();
        Ok(CollisionOperator {
            kernel,
            grid,
            table,
            basis,
        })
    }

    pub fn kernel(&self) -> &CollisionKernel {
        &self.kernel
    }
    pub fn grid(&self) -> &Arc<VelocityGrid> {
        &self.grid
    }
    pub fn rate(&self) -> f64 {
        self.kernel.rate
    }
    pub fn basis(&self) -> &[GridFunction] {
        &self.basis
    }
    pub fn is_surrogate(&self) -> bool {
        self.kernel.is_surrogate()
    }

    pub fn table(&self) -> Result<&CollisionQuadrature> {
        self.table.as_deref().ok_or(Error::NeedsUniformGrid)
    }

    pub fn with_energy_cutoff(&self, e_max: Option<f64>) -> Result<CollisionOperator> {
        let t = self.table()?.clone().with_energy_cutoff(e_max);
        Ok(CollisionOperator {
            table: Some(Arc::new(t)),
            ..self.clone()
        })
    }

    pub fn project(&self, f: &[f64]) -> GridFunction {
        self.grid.project_kernel(&self.basis, f)
    }

    /// Q(f, g). For the surrogate this is the quadratic part of the relaxation operator
    /// about M: (a/2)(I−Π)[Πf·Πg − (f−Πf)⟨g⟩ − (g−Πg)⟨f⟩].
    pub fn bilinear(&self, f: &[f64], g: &[f64]) -> GridFunction {
        if self.is_surrogate() {
            let a = self.kernel.rate;
            let pf = self.project(f);
            let pg = self.project(g);
            let mf = self.grid.bracket(f);
            let mg = self.grid.bracket(g);
            let raw: Vec<f64> = (0..f.len())
                .map(|i| pf[i] * pg[i] - (f[i] - pf[i]) * mg - (g[i] - pg[i]) * mf)
                .collect();
            let praw = self.project(&raw);
            return raw
                .iter()
                .zip(&praw)
                .map(|(r, p)| 0.5 * a * (r - p))
                .collect();
        }
        let t = self.table.as_ref().expect("Boltzmann operator has a table");
        let w = self.grid.weights();
        let rate = self.kernel.rate;
        (0..f.len())
            .into_par_iter()
            .map(|i| {
                let mut s = 0.0;
                t.for_each_from(i, |j, k, l, wt| {
                    s += wt * (f[k] * g[l] + f[l] * g[k] - f[i] * g[j] - f[j] * g[i]);
                });
                0.5 * rate * s / w[i]
            })
            .collect()
    }

    /// Collision term for a relative density G: Q(G,G) for Boltzmann kernels; the
    /// conservative relaxation a⟨G⟩(𝓜[G] − G) with the discrete Maxwellian 𝓜 for the surrogate.
    pub fn collide_relative(&self, g: &[f64]) -> Result<GridFunction> {
        if let Some((i, &x)) = g.iter().enumerate().find(|(_, x)| **x < 0.0) {
            return Err(Error::NegativeDensity { index: i, value: x });
        }
        if self.is_surrogate() {
            let m = discrete_maxwellian(&self.grid, g)?;
            let r = self.grid.bracket(g);
            let a = self.kernel.rate * r;
            return Ok(m.iter().zip(g).map(|(mi, gi)| a * (mi - gi)).collect());
        }
        Ok(self.bilinear(g, g))
    }

    /// Q(G,G) together with the loss frequency ν_i(G) = Σ_j G_j ∫b M_j (Boltzmann kernels).
    pub fn collide_with_frequency(&self, g: &[f64]) -> Result<(GridFunction, GridFunction)> {
        let t = self.table()?;
        let w = self.grid.weights();
        let rate = self.kernel.rate;
        Ok((0..g.len())
            .into_par_iter()
            .map(|i| {
                let mut q = 0.0;
                let mut nu = 0.0;
                t.for_each_from(i, |j, k, l, wt| {
                    q += wt * (g[k] * g[l] - g[i] * g[j]);
                    nu += wt * g[j];
                });
                (rate * q / w[i], rate * nu / w[i])
            })
            .unzip())
    }

    /// B(F, F) for an absolute density F.
    pub fn full(&self, f_abs: &[f64]) -> Result<GridFunction> {
        let m: Vec<f64> = self.grid.nodes().iter().map(|&v| reference_maxwellian(v)).collect();
        let g: Vec<f64> = f_abs.iter().zip(&m).map(|(f, mi)| f / mi).collect();
        let c = self.collide_relative(&g)?;
        Ok(c.iter().zip(&m).map(|(c, mi)| c * mi).collect())
    }

    /// L f = −2Q(1, f).
    pub fn linear(&self, f: &[f64]) -> GridFunction {
        if self.is_surrogate() {
            let pf = self.project(f);
            return f
                .iter()
                .zip(&pf)
                .map(|(x, p)| self.kernel.rate * (x - p))
                .collect();
        }
        let ones = vec![1.0; f.len()];
        self.bilinear(&ones, f).into_iter().map(|x| -2.0 * x).collect()
    }

    /// Collision frequency a(v) = ∫∫ b M₁ dv₁ dω.
    pub fn frequency(&self) -> GridFunction {
        if self.is_surrogate() {
            return vec![self.kernel.rate; self.grid.len()];
        }
        let t = self.table.as_ref().expect("table");
        let w = self.grid.weights();
        (0..self.grid.len())
            .into_par_iter()
            .map(|i| {
                let mut s = 0.0;
                t.for_each_from(i, |_, _, _, wt| s += wt);
                self.kernel.rate * s / w[i]
            })
            .collect()
    }

    /// ⟨⟨Ψ(v, v₁, ω)⟩⟩; each lattice event stands for ±ω with equal weight.
    pub fn double_bracket<F>(&self, psi: F) -> Result<f64>
    where
        F: Fn([f64; 3], [f64; 3], [f64; 3]) -> f64 + Sync,
    {
        let t = self.table()?;
        let nodes = self.grid.nodes();
        let rows: Vec<f64> = (0..nodes.len())
            .into_par_iter()
            .map(|i| {
                let mut s = 0.0;
                t.for_each_from(i, |j, k, l, w| {
                    let om = t.omega(&Event { i, j, k, l, weight: w });
                    let mo = [-om[0], -om[1], -om[2]];
                    s += 0.5 * w * (psi(nodes[i], nodes[j], om) + psi(nodes[i], nodes[j], mo));
                });
                s
            })
            .collect();
        Ok(rows.iter().sum())
    }

    /// Entropy production ¼⟨⟨(G′G₁′−GG₁) ln(G′G₁′/GG₁)⟩⟩ (times the rate); for the
    /// surrogate the dissipation of the relaxation dynamics a⟨G⟩⟨(G−𝓜) ln(G/𝓜)⟩.
    pub fn entropy_production(&self, g: &[f64]) -> Result<f64> {
        if self.is_surrogate() {
            let m = discrete_maxwellian(&self.grid, g)?;
            let r = self.grid.bracket(g);
            let w = self.grid.weights();
            let s: f64 = (0..g.len())
                .map(|i| {
                    if g[i] > 0.0 {
                        w[i] * (g[i] - m[i]) * (g[i] / m[i]).ln()
                    } else {
                        0.0
                    }
                })
                .sum();
            return Ok(self.kernel.rate * r * s);
        }
        let t = self.table()?;
        let rate = self.kernel.rate;
        Ok(rate
            * 0.25
            * t.sum_events(|i, j, k, l| {
                let x = g[k] * g[l];
                let y = g[i] * g[j];
                if x > 0.0 && y > 0.0 {
                    (x - y) * (x / y).ln()
                } else {
                    0.0
                }
            }))
    }

    /// max over ξ ∈ {v₁, v₂, v₃, |v|², 1+v₁−v₂+½|v|²} of ‖Q(ξ,ξ) − ½L(ξ²)‖/‖½L(ξ²)‖.
    pub fn qkerl_defect(&self) -> f64 {
        let g = &self.grid;
        let probes = [
            g.eval(|v| v[0]),
            g.eval(|v| v[1]),
            g.eval(|v| v[2]),
            g.eval(|v| dot(v, v)),
            g.eval(|v| 1.0 + v[0] - v[1] + 0.5 * dot(v, v)),
        ];
        let pairs: Vec<(GridFunction, GridFunction)> = match &self.table {
            Some(t) if !self.is_surrogate() => qkerl_sides(t, &probes, g.weights(), self.kernel.rate),
            _ => probes
                .iter()
                .map(|xi| {
                    let sq: Vec<f64> = xi.iter().map(|x| x * x).collect();
                    let half_l = self.linear(&sq).into_iter().map(|x| 0.5 * x).collect();
                    (self.bilinear(xi, xi), half_l)
                })
                .collect(),
        };
        pairs
            .iter()
            .map(|(q, half_l)| {
                let diff: Vec<f64> = q.iter().zip(half_l).map(|(a, b)| a - b).collect();
                g.norm(&diff) / g.norm(half_l).max(f64::MIN_POSITIVE)
            })
            .fold(0.0, f64::max)
    }
}

/// Q(ξ,ξ) and ½L(ξ²) for every probe in one sweep over the table; the terms match
/// `bilinear` and `linear` event by event.
fn qkerl_sides(
    t: &CollisionQuadrature,
    probes: &[GridFunction; 5],
    w: &[f64],
    rate: f64,
) -> Vec<(GridFunction, GridFunction)> {
    let rows: Vec<[f64; 10]> = (0..w.len())
        .into_par_iter()
        .map(|i| {
            let mut acc = [0.0; 10];
            t.for_each_from(i, |j, k, l, wt| {
                for (p, x) in probes.iter().enumerate() {
                    acc[p] += wt * (x[k] * x[l] + x[l] * x[k] - x[i] * x[j] - x[j] * x[i]);
                    let (xi, xj, xk, xl) = (x[i] * x[i], x[j] * x[j], x[k] * x[k], x[l] * x[l]);
                    acc[5 + p] += wt * (xk + xl - xi - xj);
                }
            });
            let s = 0.5 * rate / w[i];
            acc.map(|a| a * s)
        })
        .collect();
    (0..5)
        .map(|p| {
            // linear(f) = −2·bilinear(1, f), halved
            let q = rows.iter().map(|r| r[p]).collect();
            let half_l = rows.iter().map(|r| -(r[5 + p])).collect();
            (q, half_l)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(n: usize) -> Arc<VelocityGrid> {
        Arc::new(VelocityGrid::new(&GridSpec::uniform(n, 6.0)).unwrap())
    }

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64) / ((1u64 << 53) as f64)
    }

    #[test]
    fn post_collision_examples() {
        let (a, b) = post_collision([1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]).unwrap();
        assert_eq!(a, [-1.0, 0.0, 0.0]);
        assert_eq!(b, [1.0, 0.0, 0.0]);
        let (a, b) = post_collision([1.0, 2.0, 0.0], [-1.0, 2.0, 0.0], [0.0, 1.0, 0.0]).unwrap();
        assert_eq!((a, b), ([1.0, 2.0, 0.0], [-1.0, 2.0, 0.0]));
        assert!(post_collision([0.0; 3], [1.0; 3], [1.0, 1.0, 0.0]).is_err());
    }

    #[test]
    fn kernel_values() {
        let mut k = CollisionKernel::new(&KernelSpec::hard_sphere()).unwrap();
        k.mu_norm = 8.0 * PI.sqrt();
        assert!((kernel_eval(&k, [2.0, 0.0, 0.0], [1.0, 0.0, 0.0]) - 2.0 / k.mu_norm).abs() < 1e-15);
        assert_eq!(kernel_eval(&k, [2.0, 0.0, 0.0], [0.0, 1.0, 0.0]), 0.0);
        assert!(k.c_b <= 1.0 + 1e-12);
        let p = CollisionKernel::new(&KernelSpec::power_law(0.0)).unwrap();
        let c = 0.6f64;
        let om = [(1.0 - c * c).sqrt(), 0.0, c];
        assert!((p.raw([0.0, 0.0, 3.0], om) - c).abs() < 1e-15);
        let cf = CollisionKernel::new(&KernelSpec::constant_frequency(1.0)).unwrap();
        assert!((cf.raw([1.0, 0.0, 0.0], om) - 1.0 / (4.0 * PI)).abs() < 1e-15);
        assert!(CollisionKernel::new(&KernelSpec::power_law(1.5)).is_err());
    }

    #[test]
    fn angular_average_matches_sphere_rule() {
        let grid = VelocityGrid::new(&GridSpec::uniform(8, 6.0)).unwrap();
        for spec in [KernelSpec::hard_sphere(), KernelSpec::power_law(0.5)] {
            let k = CollisionKernel::new(&spec).unwrap();
            let z = [0.0, 0.0, 1.7];
            let num: f64 = grid
                .sphere_nodes()
                .iter()
                .zip(grid.sphere_weights())
                .map(|(om, w)| w * k.raw(z, *om))
                .sum();
            assert!((num - k.angular_average(1.7)).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_frequency_mass_is_one() {
        let g = uniform(8);
        let k = CollisionKernel::new(&KernelSpec::constant_frequency(1.0)).unwrap();
        assert!((normalize_mu(&k, &g) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn table_is_symmetric_and_normalized() {
        let g = uniform(6);
        let op = CollisionOperator::new(&KernelSpec::hard_sphere(), g.clone()).unwrap();
        let t = op.table().unwrap();
        assert!((t.total_mass() - 1.0).abs() < 1e-13);
        // every event (i,j,k,l) has its mirror images with the same weight
        let mut all = Vec::new();
        for i in 0..g.len() {
            all.extend(t.events_from(i));
        }
        let key = |e: &Event| (e.i, e.j, e.k, e.l);
        let mut map = std::collections::HashMap::new();
        for e in &all {
            *map.entry(key(e)).or_insert(0.0) += e.weight;
        }
        for e in &all {
            for img in [(e.j, e.i, e.l, e.k), (e.k, e.l, e.i, e.j)] {
                let w = map.get(&img).copied().unwrap_or(0.0);
                assert!((w - map[&key(e)]).abs() <= 1e-15 * w.abs().max(1e-300));
            }
        }
    }

    #[test]
    fn q_conserves_and_vanishes_on_one() {
        let g = uniform(6);
        let op = CollisionOperator::new(&KernelSpec::hard_sphere(), g.clone()).unwrap();
        let ones = vec![1.0; g.len()];
        assert!(op.bilinear(&ones, &ones).iter().all(|x| x.abs() < 1e-13));
        let mut seed = 7u64;
        let f: Vec<f64> = (0..g.len()).map(|_| lcg(&mut seed) - 0.5).collect();
        let q = op.bilinear(&f, &f);
        for xi in [g.eval(|_| 1.0), g.eval(|v| v[0]), g.eval(|v| v[2]), g.eval(|v| dot(v, v))] {
            assert!(g.inner(&xi, &q).abs() < 1e-14);
        }
    }

    #[test]
    fn surrogate_identities() {
        let g = Arc::new(VelocityGrid::new(&GridSpec::gauss_hermite(8)).unwrap());
        let op = CollisionOperator::new(&KernelSpec::constant_frequency(2.5), g.clone()).unwrap();
        let vx = g.eval(|v| v[0]);
        let q = op.bilinear(&vx, &vx);
        let sq: Vec<f64> = vx.iter().map(|x| x * x).collect();
        let l = op.linear(&sq);
        assert!(q.iter().zip(&l).all(|(a, b)| (a - 0.5 * b).abs() < 1e-12));
        let max = g.maxwellian_relative(1.2, [0.3, 0.0, -0.1], 0.9).unwrap();
        let c = op.collide_relative(&max).unwrap();
        assert!(c.iter().zip(&max).all(|(x, m)| x.abs() <= 1e-8 * m.max(1.0)));
    }

    #[test]
    fn discrete_maxwellian_matches_moments() {
        let g = VelocityGrid::new(&GridSpec::uniform(10, 6.0)).unwrap();
        let f: Vec<f64> = g
            .eval(|v| 1.0 + 0.3 * (-(v[0] - 1.0).powi(2)).exp() + 0.1 * v[1].tanh());
        let m = discrete_maxwellian(&g, &f).unwrap();
        let a = g.moments(&f);
        let b = g.moments(&m);
        assert!((a.rho - b.rho).abs() < 1e-13);
        assert!((a.theta - b.theta).abs() < 1e-13);
        assert!((a.u[1] - b.u[1]).abs() < 1e-13);
    }
    #[test]
    fn fused_qkerl_matches_separate_passes() {
        let op = CollisionOperator::new(&KernelSpec::hard_sphere(), uniform(6)).unwrap();
        let g = op.grid().clone();
        let probes = [
            g.eval(|v| v[0] - 0.5 * v[2]),
            g.eval(|v| v[1] * v[1]),
            g.eval(|v| (v[0] + v[1]).sin()),
            g.eval(|v| dot(v, v)),
            g.eval(|_| 1.0),
        ];
        let sides = qkerl_sides(op.table().unwrap(), &probes, g.weights(), op.rate());
        for (xi, (q, half_l)) in probes.iter().zip(&sides) {
            let sq: Vec<f64> = xi.iter().map(|x| x * x).collect();
            let q_ref = op.bilinear(xi, xi);
            let l_ref = op.linear(&sq);
            assert!(q.iter().zip(&q_ref).all(|(a, b)| (a - b).abs() <= 1e-12 * (1.0 + b.abs())));
            assert!(half_l
                .iter()
                .zip(&l_ref)
                .all(|(a, b)| (a - 0.5 * b).abs() <= 1e-12 * (1.0 + b.abs())));
        }
    }
}
