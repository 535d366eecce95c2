//! Entropy, entropy production, fluctuations, truncated moments, fluxes, conservation
//! defects, flux splitting and the hydrodynamic limit residuals of a kinetic state.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collision::CollisionOperator;
use crate::error::{Error, Result};
use crate::kinetic_solver::KineticState;
use crate::linearized::ab_fields;
use crate::nsf_solver::{divergence, grad_sq, VectorField};
use crate::velocity_space::{dot, GridFunction, VelocityGrid};

/// h(z) = (1+z)ln(1+z) − z for z > −1.
pub fn h(z: f64) -> Result<f64> {
    if !(z > -1.0) {
        return Err(Error::InvalidParameter(format!("h(z) needs z > −1, got {z}")));
    }
    Ok(h_ext(z))
}

/// h extended by continuity to z = −1.
fn h_ext(z: f64) -> f64 {
    if z <= -1.0 {
        1.0
    } else if z.abs() < 1e-4 {
        // series avoids cancellation near 0
        z * z * (0.5 - z / 6.0 + z * z / 12.0)
    } else {
        (1.0 + z) * z.ln_1p() - z
    }
}

/// h*(ζ) = e^ζ − ζ − 1.
pub fn h_star(zeta: f64) -> f64 {
    zeta.exp_m1() - zeta
}

/// ζ|z| ≤ h(|z|) + h*(ζ).
pub fn young_holds(z: f64, zeta: f64) -> bool {
    let lhs = zeta * z.abs();
    lhs <= h_ext(z.abs()) + h_star(zeta) + 1e-12 * lhs.abs().max(1.0)
}

/// Smooth cutoff γ (1 on [0, 3/2], 0 on [2, ∞)) and K(ε) = k|ln ε|.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationProfile {
    pub k_exponent: f64,
}

impl Default for TruncationProfile {
    fn default() -> Self {
        TruncationProfile { k_exponent: 7.0 }
    }
}

fn bump(t: f64) -> f64 {
    if t > 0.0 {
        (-1.0 / t).exp()
    } else {
        0.0
    }
}

impl TruncationProfile {
    pub fn new(k_exponent: f64) -> Result<Self> {
        if !(k_exponent > 6.0) {
            return Err(Error::InvalidParameter(format!("k = {k_exponent} must exceed 6")));
        }
        Ok(TruncationProfile { k_exponent })
    }

    pub fn gamma(&self, z: f64) -> f64 {
        if z <= 1.5 {
            return 1.0;
        }
        if z >= 2.0 {
            return 0.0;
        }
        let a = bump(2.0 - z);
        a / (a + bump(z - 1.5))
    }

    pub fn gamma_prime(&self, z: f64) -> f64 {
        if z <= 1.5 || z >= 2.0 {
            return 0.0;
        }
        let s = 2.0 - z;
        let t = z - 1.5;
        let a = bump(s);
        let b = bump(t);
        -a * b * (1.0 / (s * s) + 1.0 / (t * t)) / ((a + b) * (a + b))
    }

    /// γ̂(z) = d/dz((z−1)γ(z)).
    pub fn gamma_hat(&self, z: f64) -> f64 {
        self.gamma(z) + (z - 1.0) * self.gamma_prime(z)
    }

    pub fn k_eps(&self, eps: f64) -> f64 {
        self.k_exponent * eps.ln().abs()
    }
}

/// H(F|M) = ∬ h(G−1) M dv dx.
pub fn relative_entropy(s: &KineticState) -> f64 {
    let w = s.grid.weights();
    let nv = s.nv();
    let per: Vec<f64> = s
        .g
        .par_chunks_exact(nv)
        .map(|cell| cell.iter().zip(w).map(|(g, w)| w * h_ext(g - 1.0)).sum())
        .collect();
    per.iter().sum::<f64>() * s.domain.cell_volume()
}

/// E(F) per cell.
pub fn entropy_production(s: &KineticState, op: &CollisionOperator) -> Result<Vec<f64>> {
    let nv = s.nv();
    (0..s.cells())
        .map(|c| op.entropy_production(&s.g[c * nv..(c + 1) * nv]))
        .collect()
}

/// g = (G−1)/ε.
pub fn fluctuation(s: &KineticState) -> Vec<f64> {
    s.g.iter().map(|x| (x - 1.0) / s.epsilon).collect()
}

/// (√G − 1)/ε.
pub fn sqrt_fluctuation(s: &KineticState) -> Vec<f64> {
    s.g.iter().map(|x| (x.max(0.0).sqrt() - 1.0) / s.epsilon).collect()
}

/// max |g − 2q − εq²| with q = (√G−1)/ε.
pub fn identity1_residual(s: &KineticState) -> f64 {
    let eps = s.epsilon;
    s.g.iter()
        .map(|&x| {
            let g = (x - 1.0) / eps;
            let q = (x.sqrt() - 1.0) / eps;
            (g - 2.0 * q - eps * q * q).abs() / (1.0 + g.abs())
        })
        .fold(0.0, f64::max)
}

/// ⟨ξ 1_{|v|²≤K(ε)} g γ(G)⟩ per cell.
pub fn renormalized_moment(xi: &[f64], s: &KineticState, t: &TruncationProfile) -> Vec<f64> {
    let kk = t.k_eps(s.epsilon);
    let nodes = s.grid.nodes();
    let w = s.grid.weights();
    let eps = s.epsilon;
    let nv = s.nv();
    let xk: Vec<f64> = (0..nv)
        .map(|i| if dot(nodes[i], nodes[i]) <= kk { xi[i] * w[i] } else { 0.0 })
        .collect();
    s.g.par_chunks_exact(nv)
        .map(|cell| {
            cell.iter()
                .zip(&xk)
                .map(|(&g, x)| x * (g - 1.0) / eps * t.gamma(g))
                .sum()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FluxKind {
    /// Momentum flux, 6 components in xx, yy, zz, xy, xz, yz order.
    A,
    /// Energy flux, 3 components.
    B,
}

/// Per-cell flux components, `comps[component][cell]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FluxField {
    pub kind: FluxKind,
    pub comps: Vec<Vec<f64>>,
}

impl FluxField {
    fn zeros(kind: FluxKind, cells: usize) -> Self {
        let n = match kind {
            FluxKind::A => 6,
            FluxKind::B => 3,
        };
        FluxField {
            kind,
            comps: vec![vec![0.0; cells]; n],
        }
    }

    /// Frobenius norm per cell (off-diagonal tensor entries counted twice).
    pub fn pointwise_norm(&self) -> Vec<f64> {
        let cells = self.comps[0].len();
        (0..cells)
            .map(|c| {
                self.comps
                    .iter()
                    .enumerate()
                    .map(|(p, f)| {
                        let m = if self.kind == FluxKind::A && p >= 3 { 2.0 } else { 1.0 };
                        m * f[c] * f[c]
                    })
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }

    pub fn l1(&self, s: &KineticState) -> f64 {
        s.domain.l1_norm(&self.pointwise_norm())
    }

    pub fn sub(&self, other: &FluxField) -> FluxField {
        FluxField {
            kind: self.kind,
            comps: self
                .comps
                .iter()
                .zip(&other.comps)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
                .collect(),
        }
    }
}

fn zeta_fields(grid: &VelocityGrid, kind: FluxKind) -> Vec<GridFunction> {
    let (a, b) = ab_fields(grid);
    match kind {
        FluxKind::A => a,
        FluxKind::B => b,
    }
}

/// F_ε(ζ) = (1/ε)⟨ζ_{K(ε)} g γ(G)⟩.
pub fn flux(kind: FluxKind, s: &KineticState, t: &TruncationProfile) -> FluxField {
    let z = zeta_fields(&s.grid, kind);
    let mut out = FluxField::zeros(kind, s.cells());
    for (p, zp) in z.iter().enumerate() {
        out.comps[p] = renormalized_moment(zp, s, t)
            .into_iter()
            .map(|x| x / s.epsilon)
            .collect();
    }
    out
}

/// The invariants used for defects: 1, v₁, v₂, v₃, ½(|v|²−5).
pub fn defect_invariants(grid: &VelocityGrid) -> [GridFunction; 5] {
    [
        grid.eval(|_| 1.0),
        grid.eval(|v| v[0]),
        grid.eval(|v| v[1]),
        grid.eval(|v| v[2]),
        grid.eval(|v| 0.5 * (dot(v, v) - 5.0)),
    ]
}

/// D_ε(ξ) = (1/ε³)⟨⟨ξ_{K(ε)} γ̂(G)(G′G₁′ − GG₁)⟩⟩ per cell for every ξ in `xis`.
/// Uses ⟨⟨ξ(G′G₁′ − GG₁)⟩⟩ = 0 on the table so only nodes with ξ ≠ ξ_K γ̂(G) are visited.
pub fn defects(
    xis: &[&[f64]],
    s: &KineticState,
    t: &TruncationProfile,
    op: &CollisionOperator,
) -> Result<Vec<Vec<f64>>> {
    let table = op.table()?;
    let kk = t.k_eps(s.epsilon);
    let nodes = s.grid.nodes();
    let nv = s.nv();
    let scale = op.rate() / s.epsilon.powi(3);
    let inside: Vec<bool> = nodes.iter().map(|v| dot(*v, *v) <= kk).collect();
    let per_cell: Vec<Vec<f64>> = (0..s.cells())
        .into_par_iter()
        .map(|c| {
            let g = &s.g[c * nv..(c + 1) * nv];
            let mut acc = vec![0.0; xis.len()];
            for i in 0..nv {
                let gh = if inside[i] { t.gamma_hat(g[i]) } else { 0.0 };
                let psi: Vec<f64> = xis.iter().map(|x| x[i] * (1.0 - gh)).collect();
                if psi.iter().all(|p| *p == 0.0) {
                    continue;
                }
                let mut si = 0.0;
                table.for_each_from(i, |j, k, l, w| {
                    si += w * (g[k] * g[l] - g[i] * g[j]);
                });
                for (a, p) in acc.iter_mut().zip(&psi) {
                    *a -= scale * p * si;
                }
            }
            acc
        })
        .collect();
    Ok((0..xis.len())
        .map(|x| per_cell.iter().map(|v| v[x]).collect())
        .collect())
}

pub fn defect(xi: &[f64], s: &KineticState, t: &TruncationProfile, op: &CollisionOperator) -> Result<Vec<f64>> {
    Ok(defects(&[xi], s, t, op)?.remove(0))
}

/// (1/ε³)⟨⟨ξ(G′G₁′ − GG₁)⟩⟩ summed over every table event (no truncation).
pub fn defect_untruncated(xi: &[f64], s: &KineticState, op: &CollisionOperator) -> Result<Vec<f64>> {
    let table = op.table()?;
    let nv = s.nv();
    let scale = op.rate() / s.epsilon.powi(3);
    Ok((0..s.cells())
        .into_par_iter()
        .map(|c| {
            let g = &s.g[c * nv..(c + 1) * nv];
            scale * table.sum_events(|i, j, k, l| xi[i] * (g[k] * g[l] - g[i] * g[j]))
        })
        .collect())
}

/// Correctors Â (xx, yy, zz, xy, xz, yz) and B̂ used by the flux split.
#[derive(Debug, Clone)]
pub struct Correctors {
    pub a_hat: Vec<GridFunction>,
    pub b_hat: Vec<GridFunction>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FluxSplit {
    pub convective: FluxField,
    pub diffusive: FluxField,
    pub remainder: FluxField,
}

/// F_conv = 2⟨ζ(Πq)²⟩, F_diff = −2⟨ζ̂ ε⁻² Q(√G,√G)⟩ and the remainder F_ε(ζ) − F_conv − F_diff.
pub fn flux_split(
    kind: FluxKind,
    s: &KineticState,
    t: &TruncationProfile,
    op: &CollisionOperator,
    corr: &Correctors,
) -> Result<FluxSplit> {
    let grid = &s.grid;
    let z = zeta_fields(grid, kind);
    let zh = match kind {
        FluxKind::A => &corr.a_hat,
        FluxKind::B => &corr.b_hat,
    };
    let nv = s.nv();
    let eps = s.epsilon;
    let basis = op.basis();
    let rows: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..s.cells())
        .into_par_iter()
        .map(|c| {
            let g = &s.g[c * nv..(c + 1) * nv];
            let sq: Vec<f64> = g.iter().map(|x| x.max(0.0).sqrt()).collect();
            let q: Vec<f64> = sq.iter().map(|x| (x - 1.0) / eps).collect();
            let pq = grid.project_kernel(basis, &q);
            let pq2: Vec<f64> = pq.iter().map(|x| x * x).collect();
            let coll = op.bilinear(&sq, &sq);
            let conv = z.iter().map(|zp| 2.0 * grid.inner(zp, &pq2)).collect();
            let diff = zh
                .iter()
                .map(|zp| -2.0 * grid.inner(zp, &coll) / (eps * eps))
                .collect();
            Ok((conv, diff))
        })
        .collect();
    let total = flux(kind, s, t);
    let mut conv = FluxField::zeros(kind, s.cells());
    let mut diff = FluxField::zeros(kind, s.cells());
    for (c, r) in rows.into_iter().enumerate() {
        let (a, b) = r?;
        for p in 0..a.len() {
            conv.comps[p][c] = a[p];
            diff.comps[p][c] = b[p];
        }
    }
    let remainder = total.sub(&conv).sub(&diff);
    Ok(FluxSplit {
        convective: conv,
        diffusive: diff,
        remainder,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimitResiduals {
    /// ‖ρ + θ‖_{L²}.
    pub boussinesq: f64,
    /// ‖div u‖_{L²}.
    pub incompressibility: f64,
    /// ∫(½|u|² + 5/4θ²) + ∫∫(ν|∇u|² + 5/2κ|∇θ|²) − C^in.
    pub energy_slack: f64,
}

/// Fluctuation fields (ρ, u, θ) of a state.
pub fn hydro_fields(s: &KineticState) -> (Vec<f64>, VectorField, Vec<f64>) {
    let m = s.fluid_moments();
    let rho = m.iter().map(|h| h.rho).collect();
    let u = [0, 1, 2].map(|a| m.iter().map(|h| h.u[a]).collect());
    let th = m.iter().map(|h| h.theta).collect();
    (rho, u, th)
}

/// ∫(½|u|² + 5/4 θ²) dx and ∫(ν|∇u|² + 5/2 κ|∇θ|²) dx of the fluctuation moments.
pub fn hydro_energy(s: &KineticState, nu: f64, kappa: f64) -> (f64, f64) {
    let (_, u, th) = hydro_fields(s);
    let d = &s.domain;
    let e: f64 = (0..d.cells())
        .map(|c| 0.5 * (u[0][c].powi(2) + u[1][c].powi(2) + u[2][c].powi(2)) + 1.25 * th[c] * th[c])
        .sum::<f64>()
        * d.cell_volume();
    let diss = nu * (grad_sq(d, &u[0]) + grad_sq(d, &u[1]) + grad_sq(d, &u[2])) + 2.5 * kappa * grad_sq(d, &th);
    (e, diss)
}

pub fn limit_residuals(s: &KineticState, nu: f64, kappa: f64, dissipation_integral: f64, c_in: f64) -> LimitResiduals {
    let (rho, u, th) = hydro_fields(s);
    let d = &s.domain;
    let bq: Vec<f64> = rho.iter().zip(&th).map(|(r, t)| r + t).collect();
    let div = divergence(d, &u);
    let (e, _) = hydro_energy(s, nu, kappa);
    LimitResiduals {
        boussinesq: d.l2_norm(&bq),
        incompressibility: d.l2_norm(&div),
        energy_slack: e + dissipation_integral - c_in,
    }
}

/// Everything needed to evaluate a diagnostics row along a run.
#[derive(Debug, Clone)]
pub struct DiagnosticsContext {
    pub profile: TruncationProfile,
    pub nu: f64,
    pub kappa: f64,
    /// (1/ε²)H(F^in|M), measured from the initial state.
    pub c_in: f64,
    pub h_in: f64,
    pub collision: CollisionOperator,
    /// Energy-pruned table for defects; `None` skips them.
    pub defect_op: Option<CollisionOperator>,
    /// Correctors for the flux split; `None` skips it.
    pub correctors: Option<Correctors>,
}

impl DiagnosticsContext {
    /// `defect_window`: keep table events with |v|² + |v₁|² ≤ K(ε) + window.
    pub fn new(
        initial: &KineticState,
        collision: CollisionOperator,
        nu: f64,
        kappa: f64,
        profile: TruncationProfile,
        defect_window: Option<f64>,
        correctors: Option<Correctors>,
    ) -> Result<Self> {
        let h_in = relative_entropy(initial);
        let defect_op = match (defect_window, collision.table()) {
            (Some(win), Ok(_)) => Some(collision.with_energy_cutoff(Some(profile.k_eps(initial.epsilon) + win))?),
            _ => None,
        };
        Ok(DiagnosticsContext {
            profile,
            nu,
            kappa,
            c_in: h_in / initial.epsilon.powi(2),
            h_in,
            collision,
            defect_op,
            correctors,
        })
    }

    pub fn row(&self, s: &KineticState, e_int: f64, dissipation_integral: f64) -> Result<DiagnosticRow> {
        let grid = &s.grid;
        let (defect_v, defect_e) = match &self.defect_op {
            Some(op) => {
                let xi = defect_invariants(grid);
                let d = defects(&[&xi[1], &xi[2], &xi[3], &xi[4]], s, &self.profile, op)?;
                let vnorm: Vec<f64> = (0..s.cells())
                    .map(|c| (d[0][c].powi(2) + d[1][c].powi(2) + d[2][c].powi(2)).sqrt())
                    .collect();
                (s.domain.l1_norm(&vnorm), s.domain.l1_norm(&d[3]))
            }
            None => (f64::NAN, f64::NAN),
        };
        let (ra, rb) = match &self.correctors {
            Some(c) => (
                flux_split(FluxKind::A, s, &self.profile, &self.collision, c)?.remainder.l1(s),
                flux_split(FluxKind::B, s, &self.profile, &self.collision, c)?.remainder.l1(s),
            ),
            None => (f64::NAN, f64::NAN),
        };
        let lim = limit_residuals(s, self.nu, self.kappa, dissipation_integral, self.c_in);
        Ok(DiagnosticRow {
            t: s.time,
            h: relative_entropy(s),
            e_int,
            defect_v_l1: defect_v,
            defect_e_l1: defect_e,
            flux_remainder_a: ra,
            flux_remainder_b: rb,
            boussinesq: lim.boussinesq,
            div_u: lim.incompressibility,
            energy_slack: lim.energy_slack,
        })
    }
}

/// One line of the diagnostics time series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub t: f64,
    #[serde(rename = "H")]
    pub h: f64,
    #[serde(rename = "E_int")]
    pub e_int: f64,
    #[serde(rename = "defect_v_L1")]
    pub defect_v_l1: f64,
    #[serde(rename = "defect_e_L1")]
    pub defect_e_l1: f64,
    #[serde(rename = "flux_remainder_A")]
    pub flux_remainder_a: f64,
    #[serde(rename = "flux_remainder_B")]
    pub flux_remainder_b: f64,
    pub boussinesq: f64,
    pub div_u: f64,
    pub energy_slack: f64,
}

impl DiagnosticRow {
    pub const HEADER: [&'static str; 10] = [
        "t",
        "H",
        "E_int",
        "defect_v_L1",
        "defect_e_L1",
        "flux_remainder_A",
        "flux_remainder_B",
        "boussinesq",
        "div_u",
        "energy_slack",
    ];

    pub fn values(&self) -> [f64; 10] {
        [
            self.t,
            self.h,
            self.e_int,
            self.defect_v_l1,
            self.defect_e_l1,
            self.flux_remainder_a,
            self.flux_remainder_b,
            self.boussinesq,
            self.div_u,
            self.energy_slack,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collision::KernelSpec;
    use crate::kinetic_solver::{init_perturbed_maxwellian, taylor_green, InitMode};
    use crate::spectral::Domain;
    use crate::velocity_space::GridSpec;
    use std::sync::Arc;

    #[test]
    fn h_values() {
        assert_eq!(h(0.0).unwrap(), 0.0);
        assert_eq!(h_star(0.0), 0.0);
        let e = std::f64::consts::E;
        assert!((h(e - 1.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(h(-1.0).is_err());
    }

    #[test]
    fn truncation_profile() {
        let t = TruncationProfile::default();
        for &z in &[0.0, 0.7, 1.5] {
            assert_eq!(t.gamma(z), 1.0);
            assert_eq!(t.gamma_hat(z), 1.0);
        }
        assert_eq!(t.gamma(2.0), 0.0);
        assert_eq!(t.gamma_hat(2.3), 0.0);
        // numerical derivative of (z−1)γ(z)
        let step = 1e-5;
        for i in 0..=250 {
            let z = i as f64 * 0.01;
            let f = |x: f64| (x - 1.0) * t.gamma(x);
            let num = (f(z + step) - f(z - step)) / (2.0 * step);
            assert!((num - t.gamma_hat(z)).abs() < 1e-6, "z={z}");
        }
        assert!(t.k_eps(0.05) > t.k_eps(0.1));
        assert!(TruncationProfile::new(6.0).is_err());
    }

    #[test]
    fn entropy_of_small_perturbation() {
        let grid = Arc::new(VelocityGrid::new(&GridSpec::gauss_hermite(8)).unwrap());
        let d = Domain::torus(2, 2, 1).unwrap();
        let eps = 0.01;
        let mut s = KineticState::equilibrium(d, grid.clone(), 0.5).unwrap();
        assert_eq!(relative_entropy(&s), 0.0);
        let nv = s.nv();
        for c in 0..s.cells() {
            for i in 0..nv {
                s.g[c * nv + i] = 1.0 + eps * grid.nodes()[i][0];
            }
        }
        let expect = 0.5 * eps * eps * d.volume();
        assert!((relative_entropy(&s) - expect).abs() <= eps * expect);
    }

    #[test]
    fn defect_symmetry_control() {
        let grid = Arc::new(VelocityGrid::new(&GridSpec::uniform(6, 5.0)).unwrap());
        let d = Domain::torus(4, 4, 1).unwrap();
        let u = taylor_green(&d, 1.0);
        let th = d.eval(|x| 0.5 * x[1].cos());
        let s = init_perturbed_maxwellian(d, grid.clone(), &u, &th, 0.2, InitMode::ExactMaxwellian).unwrap();
        let op = CollisionOperator::new(&KernelSpec::hard_sphere(), grid.clone()).unwrap();
        let xi = defect_invariants(&grid);
        for x in &xi {
            let full = defect_untruncated(x, &s, &op).unwrap();
            assert!(full.iter().all(|v| v.abs() < 1e-11));
        }
        // with the truncation inactive (K beyond the lattice, G < 3/2) the defect vanishes
        let wide = TruncationProfile { k_exponent: 1e3 };
        let dv = defect(&xi[1], &s, &wide, &op).unwrap();
        assert!(dv.iter().all(|v| v.abs() < 1e-11));
        // and agrees with the direct sum when active
        let t = TruncationProfile::default();
        let fast = defect(&xi[4], &s, &t, &op).unwrap();
        let kk = t.k_eps(s.epsilon);
        let table = op.table().unwrap();
        let nv = s.nv();
        for c in 0..s.cells() {
            let g = &s.g[c * nv..(c + 1) * nv];
            let direct = table.sum_events(|i, j, k, l| {
                let v = grid.nodes()[i];
                let xk = if dot(v, v) <= kk { xi[4][i] * t.gamma_hat(g[i]) } else { 0.0 };
                xk * (g[k] * g[l] - g[i] * g[j])
            }) * op.rate()
                / s.epsilon.powi(3);
            assert!((fast[c] - direct).abs() < 1e-10 * (1.0 + direct.abs()));
        }
    }
}
