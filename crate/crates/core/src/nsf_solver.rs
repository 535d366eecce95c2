//! Pseudo-spectral solver for incompressible Navier–Stokes–Fourier on the periodic box:
//! ∂tu + div(u⊗u) + ∇p = νΔu, div u = 0, ∂tθ + div(uθ) = κΔθ.

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinetic_solver::KineticState;
use crate::spectral::{Domain, Fft3};

pub type VectorField = [Vec<f64>; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct HydroFields {
    pub u: VectorField,
    pub theta: Vec<f64>,
    pub p: Vec<f64>,
    pub nu: f64,
    pub kappa: f64,
    pub time: f64,
    pub domain: Domain,
}

impl HydroFields {
    pub fn zeros(domain: Domain, nu: f64, kappa: f64) -> Self {
        let n = domain.cells();
        HydroFields {
            u: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            theta: vec![0.0; n],
            p: vec![0.0; n],
            nu,
            kappa,
            time: 0.0,
            domain,
        }
    }

    /// ∫(½|u|² + 5/4 θ²) dx.
    pub fn energy(&self) -> f64 {
        let d = &self.domain;
        let ke: f64 = (0..d.cells())
            .map(|c| 0.5 * (self.u[0][c].powi(2) + self.u[1][c].powi(2) + self.u[2][c].powi(2)))
            .sum();
        let te: f64 = self.theta.iter().map(|t| 1.25 * t * t).sum();
        (ke + te) * d.cell_volume()
    }

    pub fn kinetic_energy(&self) -> f64 {
        let d = &self.domain;
        (0..d.cells())
            .map(|c| 0.5 * (self.u[0][c].powi(2) + self.u[1][c].powi(2) + self.u[2][c].powi(2)))
            .sum::<f64>()
            * d.cell_volume()
    }

    /// ∫(ν|∇u|² + 5/2 κ|∇θ|²) dx.
    pub fn dissipation(&self) -> f64 {
        let d = &self.domain;
        let mut s = 0.0;
        for comp in &self.u {
            s += self.nu * grad_sq(d, comp);
        }
        s + 2.5 * self.kappa * grad_sq(d, &self.theta)
    }
}

/// ∫|∇f|² dx, spectrally.
pub fn grad_sq(d: &Domain, f: &[f64]) -> f64 {
    let fft = Fft3::new(*d);
    let z = fft.forward_real(f);
    let k = [d.derivative_wavenumbers(0), d.derivative_wavenumbers(1), d.derivative_wavenumbers(2)];
    let n = d.cells() as f64;
    let s: f64 = (0..d.cells())
        .map(|c| {
            let id = d.indices(c);
            let k2 = k[0][id[0]].powi(2) + k[1][id[1]].powi(2) + k[2][id[2]].powi(2);
            k2 * z[c].norm_sqr()
        })
        .sum();
    // Parseval: Σ|f|² Δx = Σ|f̂|² V / N²
    s * d.volume() / (n * n)
}

fn spectra(fft: &Fft3, w: &VectorField) -> [Vec<Complex64>; 3] {
    [0, 1, 2].map(|a| fft.forward_real(&w[a]))
}

// Nyquist wavenumbers are zeroed as for derivatives; a signed ±N/2 would break the
// conjugate symmetry of real data.
fn project_spectral(d: &Domain, z: &mut [Vec<Complex64>; 3]) {
    let k = [d.derivative_wavenumbers(0), d.derivative_wavenumbers(1), d.derivative_wavenumbers(2)];
    for c in 0..d.cells() {
        let id = d.indices(c);
        let kv = [k[0][id[0]], k[1][id[1]], k[2][id[2]]];
        let k2 = kv[0] * kv[0] + kv[1] * kv[1] + kv[2] * kv[2];
        if k2 == 0.0 {
            continue;
        }
        let kz = (kv[0] * z[0][c] + kv[1] * z[1][c] + kv[2] * z[2][c]) / k2;
        for a in 0..3 {
            z[a][c] -= kz * kv[a];
        }
    }
}

/// Leray projection P w onto divergence-free fields.
pub fn leray_project(d: &Domain, w: &VectorField) -> VectorField {
    let fft = Fft3::new(*d);
    let mut z = spectra(&fft, w);
    project_spectral(d, &mut z);
    z.map(|c| fft.inverse_real(c))
}

/// Q w = w − P w, the gradient part.
pub fn gradient_part(d: &Domain, w: &VectorField) -> VectorField {
    let p = leray_project(d, w);
    [0, 1, 2].map(|a| w[a].iter().zip(&p[a]).map(|(x, y)| x - y).collect())
}

/// ‖(I − P)u‖ relative to ‖u‖ (0 for u = 0).
pub fn leray_residual(d: &Domain, u: &VectorField) -> f64 {
    let q = gradient_part(d, u);
    let nq: f64 = q.iter().map(|c| d.l2_norm(c).powi(2)).sum::<f64>().sqrt();
    let nu: f64 = u.iter().map(|c| d.l2_norm(c).powi(2)).sum::<f64>().sqrt();
    if nu == 0.0 {
        0.0
    } else {
        nq / nu
    }
}

/// div w, spectrally.
pub fn divergence(d: &Domain, w: &VectorField) -> Vec<f64> {
    let fft = Fft3::new(*d);
    let z = spectra(&fft, w);
    let k = [d.derivative_wavenumbers(0), d.derivative_wavenumbers(1), d.derivative_wavenumbers(2)];
    let out: Vec<Complex64> = (0..d.cells())
        .map(|c| {
            let id = d.indices(c);
            Complex64::i() * (k[0][id[0]] * z[0][c] + k[1][id[1]] * z[1][c] + k[2][id[2]] * z[2][c])
        })
        .collect();
    fft.inverse_real(out)
}

/// ∇f, spectrally.
pub fn gradient(d: &Domain, f: &[f64]) -> VectorField {
    let fft = Fft3::new(*d);
    let z = fft.forward_real(f);
    [0, 1, 2].map(|a| {
        let k = d.derivative_wavenumbers(a);
        let za: Vec<Complex64> = (0..d.cells())
            .map(|c| Complex64::i() * k[d.indices(c)[a]] * z[c])
            .collect();
        fft.inverse_real(za)
    })
}

/// Williamson's 2N-storage third-order Runge–Kutta.
const RK_A: [f64; 3] = [0.0, -5.0 / 9.0, -153.0 / 128.0];
const RK_B: [f64; 3] = [1.0 / 3.0, 15.0 / 16.0, 8.0 / 15.0];
const RK_C: [f64; 4] = [0.0, 1.0 / 3.0, 3.0 / 4.0, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NsfConfig {
    pub dt: f64,
    pub t_end: f64,
    /// Advective Courant bound dt·max|u|/Δx ≤ cfl.
    pub cfl: f64,
}

impl Default for NsfConfig {
    fn default() -> Self {
        NsfConfig {
            dt: 1e-2,
            t_end: 1.0,
            cfl: 1.0,
        }
    }
}

pub struct NsfSolver {
    domain: Domain,
    fft: Fft3,
    k: [Vec<f64>; 3],
    dealias: Vec<bool>,
}

impl std::fmt::Debug for NsfSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NsfSolver").field("domain", &self.domain).finish()
    }
}

impl NsfSolver {
    pub fn new(domain: Domain) -> Self {
        let k = [0, 1, 2].map(|a| domain.derivative_wavenumbers(a));
        let dealias = (0..domain.cells())
            .map(|c| {
                let id = domain.indices(c);
                (0..3).all(|a| {
                    let n = domain.n[a];
                    let m = if id[a] <= n / 2 { id[a] } else { n - id[a] };
                    3 * m < n || n == 1
                })
            })
            .collect();
        NsfSolver {
            fft: Fft3::new(domain),
            domain,
            k,
            dealias,
        }
    }

    fn k2(&self, c: usize) -> f64 {
        let id = self.domain.indices(c);
        self.k[0][id[0]].powi(2) + self.k[1][id[1]].powi(2) + self.k[2][id[2]].powi(2)
    }

    /// Largest dt allowed by the advective Courant condition.
    pub fn cfl_limit(&self, f: &HydroFields, cfl: f64) -> f64 {
        let umax = (0..self.domain.cells())
            .map(|c| f.u[0][c].abs() / self.domain.dx(0) + f.u[1][c].abs() / self.domain.dx(1) + f.u[2][c].abs() / self.domain.dx(2))
            .fold(0.0, f64::max);
        if umax == 0.0 {
            f64::INFINITY
        } else {
            cfl / umax
        }
    }

    /// Dealiased nonlinear terms −P div(u⊗u), −div(uθ) in spectral space, given physical u, θ.
    fn nonlinear(&self, u: &VectorField, th: &[f64]) -> ([Vec<Complex64>; 3], Vec<Complex64>, Vec<Complex64>) {
        let d = &self.domain;
        let n = d.cells();
        let pairs = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)];
        let prod: Vec<Vec<Complex64>> = pairs
            .par_iter()
            .map(|&(a, b)| {
                let p: Vec<f64> = (0..n).map(|c| u[a][c] * u[b][c]).collect();
                self.fft.forward_real(&p)
            })
            .collect();
        let flux_t: Vec<Vec<Complex64>> = (0..3)
            .into_par_iter()
            .map(|a| {
                let p: Vec<f64> = (0..n).map(|c| u[a][c] * th[c]).collect();
                self.fft.forward_real(&p)
            })
            .collect();
        let idx = |a: usize, b: usize| pairs.iter().position(|&p| p == (a.min(b), a.max(b))).unwrap();
        let mut nu_hat = [vec![Complex64::default(); n], vec![Complex64::default(); n], vec![Complex64::default(); n]];
        let mut nt_hat = vec![Complex64::default(); n];
        let mut p_hat = vec![Complex64::default(); n];
        for c in 0..n {
            if !self.dealias[c] {
                continue;
            }
            let id = d.indices(c);
            let kv = [self.k[0][id[0]], self.k[1][id[1]], self.k[2][id[2]]];
            for a in 0..3 {
                let mut s = Complex64::default();
                for b in 0..3 {
                    s += kv[b] * prod[idx(a, b)][c];
                }
                nu_hat[a][c] = -Complex64::i() * s;
            }
            nt_hat[c] = -Complex64::i() * (kv[0] * flux_t[0][c] + kv[1] * flux_t[1][c] + kv[2] * flux_t[2][c]);
            let k2 = kv[0] * kv[0] + kv[1] * kv[1] + kv[2] * kv[2];
            if k2 > 0.0 {
                // −Δp = ∂a∂b(u_a u_b)
                let mut s = Complex64::default();
                for a in 0..3 {
                    for b in 0..3 {
                        s += kv[a] * kv[b] * prod[idx(a, b)][c];
                    }
                }
                p_hat[c] = -s / k2;
            }
        }
        project_spectral(d, &mut nu_hat);
        (nu_hat, nt_hat, p_hat)
    }

    /// One integrating-factor low-storage RK3 step.
    pub fn step(&self, f: &mut HydroFields, dt: f64, cfl: f64) -> Result<()> {
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter(format!("dt = {dt}")));
        }
        let limit = self.cfl_limit(f, cfl);
        if dt > limit {
            return Err(Error::Cfl { dt, limit });
        }
        let n = self.domain.cells();
        let mut uh = spectra(&self.fft, &f.u);
        let mut th = self.fft.forward_real(&f.theta);
        let mut qu = [vec![Complex64::default(); n], vec![Complex64::default(); n], vec![Complex64::default(); n]];
        let mut qt = vec![Complex64::default(); n];
        let mut p_hat = Vec::new();
        for j in 0..3 {
            let u_phys: VectorField = [0, 1, 2].map(|a| self.fft.inverse_real(uh[a].clone()));
            let t_phys = self.fft.inverse_real(th.clone());
            let (nu_hat, nt_hat, ph) = self.nonlinear(&u_phys, &t_phys);
            if j == 0 {
                p_hat = ph;
            }
            let h = (RK_C[j + 1] - RK_C[j]) * dt;
            for c in 0..n {
                let k2 = self.k2(c);
                let eu = (-f.nu * k2 * h).exp();
                let et = (-f.kappa * k2 * h).exp();
                for a in 0..3 {
                    qu[a][c] = eu * (RK_A[j] * qu[a][c] + dt * nu_hat[a][c]);
                    uh[a][c] = eu * uh[a][c] + RK_B[j] * qu[a][c];
                }
                qt[c] = et * (RK_A[j] * qt[c] + dt * nt_hat[c]);
                th[c] = et * th[c] + RK_B[j] * qt[c];
            }
        }
        project_spectral(&self.domain, &mut uh);
        f.u = uh.map(|z| self.fft.inverse_real(z));
        f.theta = self.fft.inverse_real(th);
        f.p = self.fft.inverse_real(p_hat);
        f.time += dt;
        if f.u.iter().flatten().chain(&f.theta).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                step: (f.time / dt).round() as usize,
                dump: None,
            });
        }
        Ok(())
    }
}

/// A recorded point of the energy law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyRecord {
    pub t: f64,
    pub energy: f64,
    pub dissipation: f64,
}

/// Integrate from `f` to `t_end`, recording the energy law every step.
pub fn run_nsf(f: &mut HydroFields, cfg: &NsfConfig) -> Result<Vec<EnergyRecord>> {
    let solver = NsfSolver::new(f.domain);
    let mut series = vec![EnergyRecord {
        t: f.time,
        energy: f.energy(),
        dissipation: f.dissipation(),
    }];
    let steps = ((cfg.t_end - f.time) / cfg.dt).round().max(0.0) as usize;
    let t0 = f.time;
    for s in 0..steps {
        let target = t0 + (s + 1) as f64 * cfg.dt;
        solver.step(f, target - f.time, cfg.cfl)?;
        series.push(EnergyRecord {
            t: f.time,
            energy: f.energy(),
            dissipation: f.dissipation(),
        });
    }
    Ok(series)
}

/// max_t |E(t) + ∫₀ᵗ D − E(0)| / E(0) over the series (composite Simpson in time).
pub fn energy_balance(series: &[EnergyRecord]) -> f64 {
    if series.len() < 2 {
        return 0.0;
    }
    let e0 = series[0].energy;
    let mut worst: f64 = 0.0;
    let mut integral = 0.0;
    let mut i = 0;
    while i + 1 < series.len() {
        if i + 2 < series.len() {
            let (a, b, c) = (series[i], series[i + 1], series[i + 2]);
            let h1 = b.t - a.t;
            let h2 = c.t - b.t;
            if (h1 - h2).abs() <= 1e-12 * h1.abs().max(1e-300) {
                let mid = integral + h1 / 12.0 * (5.0 * a.dissipation + 8.0 * b.dissipation - c.dissipation);
                worst = worst.max((b.energy + mid - e0).abs());
                integral += h1 / 3.0 * (a.dissipation + 4.0 * b.dissipation + c.dissipation);
                worst = worst.max((c.energy + integral - e0).abs());
                i += 2;
                continue;
            }
        }
        let (a, b) = (series[i], series[i + 1]);
        integral += 0.5 * (b.t - a.t) * (a.dissipation + b.dissipation);
        worst = worst.max((b.energy + integral - e0).abs());
        i += 1;
    }
    if e0 > 0.0 {
        worst / e0
    } else {
        worst
    }
}

/// u = P⟨v g⟩ and θ = ⟨(⅕|v|² − 1) g⟩ from a kinetic state.
pub fn init_from_kinetic(s: &KineticState, nu: f64, kappa: f64) -> HydroFields {
    let m = s.fluid_moments();
    let d = s.domain;
    let raw: VectorField = [0, 1, 2].map(|a| m.iter().map(|h| h.u[a]).collect());
    // ⟨|v|² g⟩ = 3ρ + 3θ for the (ρ, u, θ) returned by `moments`
    let theta = m.iter().map(|h| (3.0 * h.theta - 2.0 * h.rho) / 5.0).collect();
    let mut f = HydroFields::zeros(d, nu, kappa);
    f.u = leray_project(&d, &raw);
    f.theta = theta;
    f.time = s.time;
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinetic_solver::taylor_green;

    #[test]
    fn leray_properties() {
        let d = Domain::torus(16, 16, 4).unwrap();
        let grad = [d.eval(|x| x[0].cos()), vec![0.0; d.cells()], vec![0.0; d.cells()]];
        let p = leray_project(&d, &grad);
        assert!(p.iter().flatten().all(|x| x.abs() < 1e-13));
        let tg = taylor_green(&d, 1.0);
        let p = leray_project(&d, &tg);
        for a in 0..3 {
            assert!(p[a].iter().zip(&tg[a]).all(|(x, y)| (x - y).abs() < 1e-12));
        }
        let w: VectorField = [
            d.eval(|x| (x[0] + 2.0 * x[1]).sin() + x[2].cos()),
            d.eval(|x| (x[0] - x[2]).cos()),
            d.eval(|x| (3.0 * x[1]).sin() * x[0].cos()),
        ];
        let p = leray_project(&d, &w);
        let q = gradient_part(&d, &w);
        let ip: f64 = (0..3).map(|a| p[a].iter().zip(&q[a]).map(|(x, y)| x * y).sum::<f64>()).sum();
        assert!(ip.abs() * d.cell_volume() < 1e-12);
        assert!(divergence(&d, &p).iter().all(|x| x.abs() < 1e-12));
        let pp = leray_project(&d, &p);
        assert!((0..3).all(|a| pp[a].iter().zip(&p[a]).all(|(x, y)| (x - y).abs() < 1e-12)));
    }

    #[test]
    fn heat_mode_decays_exactly() {
        let d = Domain::torus(16, 16, 1).unwrap();
        let mut f = HydroFields::zeros(d, 0.5, 0.3);
        f.theta = d.eval(|x| x[0].sin());
        let th0 = f.theta.clone();
        let series = run_nsf(&mut f, &NsfConfig { dt: 0.025, t_end: 1.0, cfl: 1.0 }).unwrap();
        let decay = (-0.3f64).exp();
        assert!(f.theta.iter().zip(&th0).all(|(a, b)| (a - decay * b).abs() < 1e-13));
        let r = energy_balance(&series);
        assert!(r < 1e-8, "{r}");
    }

    #[test]
    fn zero_is_fixed_point() {
        let d = Domain::torus(8, 8, 1).unwrap();
        let mut f = HydroFields::zeros(d, 1.0, 1.0);
        let s = run_nsf(&mut f, &NsfConfig::default()).unwrap();
        assert!(f.u.iter().flatten().all(|x| *x == 0.0));
        assert_eq!(energy_balance(&s), 0.0);
    }

    #[test]
    fn taylor_green_energy() {
        let d = Domain::torus(32, 32, 1).unwrap();
        let nu = 0.1;
        let mut f = HydroFields::zeros(d, nu, nu);
        f.u = taylor_green(&d, 1.0);
        let e0 = f.energy();
        let series = run_nsf(&mut f, &NsfConfig { dt: 0.01, t_end: 1.0, cfl: 1.0 }).unwrap();
        for r in &series {
            let exact = e0 * (-4.0 * nu * r.t).exp();
            assert!(((r.energy - exact) / exact).abs() < 1e-10);
        }
        assert!(energy_balance(&series) < 1e-6);
    }

    #[test]
    fn cfl_rejected() {
        let d = Domain::torus(16, 16, 1).unwrap();
        let mut f = HydroFields::zeros(d, 0.1, 0.1);
        f.u = taylor_green(&d, 10.0);
        let s = NsfSolver::new(d);
        assert!(matches!(s.step(&mut f, 1.0, 1.0), Err(Error::Cfl { .. })));
    }
}
