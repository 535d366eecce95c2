//! Scaled Boltzmann equation ε²∂tF + εv·∇xF = B(F,F) on a periodic box, in the relative
//! density G = F/M. Lie splitting: exact spectral free transport, then a collision stage.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::collision::{fit_maxwellian, CollisionOperator};
use crate::diagnostics::{hydro_energy, relative_entropy, DiagnosticRow, DiagnosticsContext};
use crate::error::{Error, Result};
use crate::nsf_solver::leray_residual;
use crate::spectral::{Domain, Fft3};
use crate::velocity_space::{dot, GridSpec, HydroPoint, VelocityGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    ImexBgk,
    ImexPenalizedBoltzmann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollisionBackend {
    Full,
    BgkSurrogate,
}

/// How the relaxation stage of `imex_bgk` integrates dG/dt = (a⟨G⟩/ε²)(𝓜 − G).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relaxation {
    /// Exact exponential factor e^{−λ}.
    #[default]
    Exact,
    /// Trapezoidal factor (1 − λ/2)/(1 + λ/2).
    CrankNicolson,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// G = 1 + ε(u·v + θ·½(|v|²−5)), clipped at 0.
    #[default]
    Linearized,
    /// G = M_{1/(1+εθ), εu, 1+εθ}/M.
    ExactMaxwellian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub scheme: Scheme,
    pub backend: CollisionBackend,
    /// Time step; `None` selects cfl·ε·Δx/v_max.
    pub dt: Option<f64>,
    pub cfl: f64,
    pub t_end: f64,
    pub bgk_frequency: f64,
    pub relaxation: Relaxation,
    pub max_halvings: usize,
    pub dump_dir: Option<PathBuf>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            scheme: Scheme::ImexBgk,
            backend: CollisionBackend::BgkSurrogate,
            dt: None,
            cfl: 0.5,
            t_end: 1.0,
            bgk_frequency: 1.0,
            relaxation: Relaxation::Exact,
            max_halvings: 8,
            dump_dir: None,
        }
    }
}

/// Relative density G on cells × velocity nodes (cell-major).
#[derive(Debug, Clone)]
pub struct KineticState {
    pub g: Vec<f64>,
    pub epsilon: f64,
    pub time: f64,
    pub domain: Domain,
    pub grid: Arc<VelocityGrid>,
}

impl KineticState {
    /// Global equilibrium G ≡ 1.
    pub fn equilibrium(domain: Domain, grid: Arc<VelocityGrid>, epsilon: f64) -> Result<Self> {
        check_epsilon(epsilon)?;
        Ok(KineticState {
            g: vec![1.0; domain.cells() * grid.len()],
            epsilon,
            time: 0.0,
            domain,
            grid,
        })
    }

    pub fn nv(&self) -> usize {
        self.grid.len()
    }
    pub fn cells(&self) -> usize {
        self.domain.cells()
    }
    pub fn cell(&self, c: usize) -> &[f64] {
        let nv = self.nv();
        &self.g[c * nv..(c + 1) * nv]
    }

    /// ∬ G M dv dx.
    pub fn mass(&self) -> f64 {
        self.invariants()[0]
    }

    /// ∬ (1, v, |v|²) G M dv dx.
    pub fn invariants(&self) -> [f64; 5] {
        let w = self.grid.weights();
        let nodes = self.grid.nodes();
        let nv = self.nv();
        let mut tot = [0.0; 5];
        for cell in self.g.chunks_exact(nv) {
            for i in 0..nv {
                let wg = w[i] * cell[i];
                let v = nodes[i];
                tot[0] += wg;
                tot[1] += v[0] * wg;
                tot[2] += v[1] * wg;
                tot[3] += v[2] * wg;
                tot[4] += dot(v, v) * wg;
            }
        }
        tot.map(|x| x * self.domain.cell_volume())
    }

    /// Fluctuation moments (ρ, u, θ) of g = (G−1)/ε in every cell.
    pub fn fluid_moments(&self) -> Vec<HydroPoint> {
        let nv = self.nv();
        let eps = self.epsilon;
        self.g
            .par_chunks_exact(nv)
            .map(|cell| {
                let gf: Vec<f64> = cell.iter().map(|x| (x - 1.0) / eps).collect();
                self.grid.moments(&gf)
            })
            .collect()
    }

    /// Reflect x_axis ↦ −x_axis together with v_axis ↦ −v_axis.
    pub fn mirrored(&self, axis: usize) -> Result<Self> {
        let n = self.grid.n_per_axis();
        let nv = self.nv();
        let nodes = self.grid.nodes();
        // the mirrored velocity node of every node
        let vmap: Vec<usize> = (0..nv)
            .map(|i| {
                let mut id = self.grid.axis_indices(i);
                id[axis] = n - 1 - id[axis];
                self.grid.index(id[0], id[1], id[2])
            })
            .collect();
        for (i, &j) in vmap.iter().enumerate() {
            if (nodes[j][axis] + nodes[i][axis]).abs() > 1e-12 {
                return Err(Error::InvalidGrid("velocity grid is not symmetric".into()));
            }
        }
        let mut g = vec![0.0; self.g.len()];
        let nax = self.domain.n[axis];
        for c in 0..self.cells() {
            let mut id = self.domain.indices(c);
            id[axis] = (nax - id[axis]) % nax;
            let cm = self.domain.index(id[0], id[1], id[2]);
            for i in 0..nv {
                g[cm * nv + vmap[i]] = self.g[c * nv + i];
            }
        }
        Ok(KineticState { g, ..self.clone() })
    }

    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        let header = SnapshotHeader {
            version: SNAPSHOT_VERSION,
            epsilon: self.epsilon,
            time: self.time,
            domain: self.domain,
            grid: self.grid.spec().clone(),
            nv: self.nv(),
            cells: self.cells(),
        };
        let hjson = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(16 + hjson.len() + 8 * self.g.len());
        buf.extend_from_slice(SNAPSHOT_MAGIC);
        buf.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
        buf.extend_from_slice(&hjson);
        for x in &self.g {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_snapshot(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        if buf.len() < 16 || &buf[..8] != SNAPSHOT_MAGIC {
            return Err(Error::Snapshot(format!("{}: not a state snapshot", path.display())));
        }
        let hlen = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
        let hend = 16 + hlen;
        if buf.len() < hend {
            return Err(Error::Snapshot("truncated header".into()));
        }
        let header: SnapshotHeader = serde_json::from_slice(&buf[16..hend])?;
        if header.version != SNAPSHOT_VERSION {
            return Err(Error::Snapshot(format!("unsupported version {}", header.version)));
        }
        let grid = Arc::new(VelocityGrid::new(&header.grid)?);
        if grid.len() != header.nv || header.domain.cells() != header.cells {
            return Err(Error::Snapshot("header sizes are inconsistent".into()));
        }
        let count = header.nv * header.cells;
        if buf.len() != hend + 8 * count {
            return Err(Error::Snapshot(format!(
                "expected {count} values, found {} bytes",
                buf.len() - hend
            )));
        }
        let g = buf[hend..]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(KineticState {
            g,
            epsilon: header.epsilon,
            time: header.time,
            domain: header.domain,
            grid,
        })
    }
}

const SNAPSHOT_MAGIC: &[u8; 8] = b"HLSNAP\0\x01";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotHeader {
    version: u32,
    epsilon: f64,
    time: f64,
    domain: Domain,
    grid: GridSpec,
    nv: usize,
    cells: usize,
}

fn check_epsilon(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidParameter(format!("ε = {eps} must lie in (0,1)")));
    }
    Ok(())
}

/// Perturbed-Maxwellian data with fluctuation (u_in, θ_in); u_in must be divergence free.
pub fn init_perturbed_maxwellian(
    domain: Domain,
    grid: Arc<VelocityGrid>,
    u_in: &[Vec<f64>; 3],
    theta_in: &[f64],
    epsilon: f64,
    mode: InitMode,
) -> Result<KineticState> {
    check_epsilon(epsilon)?;
    let cells = domain.cells();
    if u_in.iter().any(|c| c.len() != cells) || theta_in.len() != cells {
        return Err(Error::InvalidParameter("initial fields do not match the spatial grid".into()));
    }
    let res = leray_residual(&domain, u_in);
    if res > 1e-8 {
        return Err(Error::Divergence(res));
    }
    let nv = grid.len();
    let nodes = grid.nodes();
    let mut g = vec![0.0; cells * nv];
    g.par_chunks_exact_mut(nv).enumerate().for_each(|(c, cell)| {
        let u = [u_in[0][c], u_in[1][c], u_in[2][c]];
        let th = theta_in[c];
        for (x, v) in cell.iter_mut().zip(nodes) {
            let v2 = dot(*v, *v);
            *x = match mode {
                InitMode::Linearized => (1.0 + epsilon * (dot(u, *v) + th * 0.5 * (v2 - 5.0))).max(0.0),
                InitMode::ExactMaxwellian => {
                    let t = 1.0 + epsilon * th;
                    let uu = u.map(|x| epsilon * x);
                    crate::velocity_space::relative_maxwellian(1.0 / t, uu, t, *v)
                }
            };
        }
    });
    if let Some(c) = g.iter().position(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::NegativeDensity { index: c, value: g[c] });
    }
    Ok(KineticState {
        g,
        epsilon,
        time: 0.0,
        domain,
        grid,
    })
}

/// Outcome of one accepted step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepReport {
    pub dt: f64,
    pub substeps: usize,
    pub halvings: usize,
    /// (1/ε²)∫∫E dx dt over the step.
    pub entropy_production: f64,
}

pub struct KineticSolver {
    cfg: SolverConfig,
    op: CollisionOperator,
    fft: Fft3,
    dt: f64,
    /// Warm starts for the discrete-Maxwellian fits, per cell.
    warm: Vec<Option<[f64; 5]>>,
}

impl std::fmt::Debug for KineticSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KineticSolver")
            .field("cfg", &self.cfg)
            .field("dt", &self.dt)
            .finish()
    }
}

impl KineticSolver {
    pub fn new(cfg: SolverConfig, op: CollisionOperator, state: &KineticState) -> Result<Self> {
        match (cfg.scheme, cfg.backend, op.is_surrogate()) {
            (Scheme::ImexBgk, CollisionBackend::BgkSurrogate, true) => {}
            (Scheme::ImexPenalizedBoltzmann, CollisionBackend::Full, false) => {}
            _ => {
                return Err(Error::InvalidParameter(format!(
                    "scheme {:?} with backend {:?} does not match the collision kernel",
                    cfg.scheme, cfg.backend
                )))
            }
        }
        if op.grid().spec() != state.grid.spec() {
            return Err(Error::InvalidGrid("solver and state use different velocity grids".into()));
        }
        let eps = state.epsilon;
        let vmax = state.grid.max_axis_speed();
        let limit = cfg.cfl.max(0.0) * eps * state.domain.min_dx() / vmax;
        let limit = if limit.is_finite() { limit } else { f64::INFINITY };
        let dt = match cfg.dt {
            Some(dt) => {
                if !(dt > 0.0) {
                    return Err(Error::InvalidParameter(format!("dt = {dt}")));
                }
                let hard = eps * state.domain.min_dx() / vmax;
                if dt > hard * (1.0 + 1e-12) {
                    return Err(Error::Cfl { dt, limit: hard });
                }
                dt
            }
            None => {
                if !limit.is_finite() {
                    return Err(Error::InvalidParameter(
                        "dt must be given for a spatially homogeneous run".into(),
                    ));
                }
                limit
            }
        };
        Ok(KineticSolver {
            fft: Fft3::new(state.domain),
            warm: vec![None; state.cells()],
            cfg,
            op,
            dt,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn config(&self) -> &SolverConfig {
        &self.cfg
    }
    pub fn collision(&self) -> &CollisionOperator {
        &self.op
    }

    /// Advance by `dt()` (clamped so as not to pass `t_stop`), halving on positivity loss.
    pub fn step_to(&mut self, s: &mut KineticState, t_stop: f64) -> Result<StepReport> {
        let dt = self.dt.min(t_stop - s.time);
        if !(dt > 0.0) {
            return Ok(StepReport::default());
        }
        self.advance(s, dt, 0)
    }

    pub fn step(&mut self, s: &mut KineticState) -> Result<StepReport> {
        let dt = self.dt;
        self.advance(s, dt, 0)
    }

    fn advance(&mut self, s: &mut KineticState, dt: f64, depth: usize) -> Result<StepReport> {
        let saved = s.g.clone();
        let warm = self.warm.clone();
        match self.raw_step(s, dt) {
            Ok(e) => {
                s.time += dt;
                Ok(StepReport {
                    dt,
                    substeps: 1,
                    halvings: depth,
                    entropy_production: e,
                })
            }
            Err(Error::NegativeDensity { .. }) => {
                s.g = saved;
                self.warm = warm;
                if depth >= self.cfg.max_halvings {
                    return Err(Error::Positivity { halvings: depth });
                }
                let a = self.advance(s, 0.5 * dt, depth + 1)?;
                let b = self.advance(s, 0.5 * dt, depth + 1)?;
                Ok(StepReport {
                    dt,
                    substeps: a.substeps + b.substeps,
                    halvings: a.halvings.max(b.halvings),
                    entropy_production: a.entropy_production + b.entropy_production,
                })
            }
            Err(Error::NonFinite { .. }) => {
                let dump = self.dump(s);
                Err(Error::NonFinite {
                    step: (s.time / self.dt).round() as usize,
                    dump,
                })
            }
            Err(e) => Err(e),
        }
    }

    fn dump(&self, s: &KineticState) -> Option<PathBuf> {
        let dir = self.cfg.dump_dir.as_ref()?;
        let path = dir.join(format!("nonfinite_t{:.6}.snap", s.time));
        s.write_snapshot(&path).ok().map(|_| path)
    }

    /// Transport then collision; returns the entropy-production increment.
    fn raw_step(&mut self, s: &mut KineticState, dt: f64) -> Result<f64> {
        self.transport(s, dt);
        if let Some((i, &x)) = s.g.iter().enumerate().find(|(_, x)| **x < 0.0 || !x.is_finite()) {
            return Err(if x.is_finite() {
                Error::NegativeDensity { index: i, value: x }
            } else {
                Error::NonFinite { step: 0, dump: None }
            });
        }
        let e = match self.cfg.scheme {
            Scheme::ImexBgk => self.relax_bgk(s, dt)?,
            Scheme::ImexPenalizedBoltzmann => self.collide_penalized(s, dt)?,
        };
        if let Some((i, &x)) = s.g.iter().enumerate().find(|(_, x)| **x < 0.0 || !x.is_finite()) {
            return Err(if x.is_finite() {
                Error::NegativeDensity { index: i, value: x }
            } else {
                Error::NonFinite { step: 0, dump: None }
            });
        }
        Ok(e)
    }

    /// G(x, v) ← G(x − v·dt/ε, v) by a Fourier phase shift per velocity node.
    fn transport(&self, s: &mut KineticState, dt: f64) {
        let d = s.domain;
        let cells = d.cells();
        if cells == 1 {
            return;
        }
        let nv = s.nv();
        let tau = dt / s.epsilon;
        let k = [d.wavenumbers(0), d.wavenumbers(1), d.wavenumbers(2)];
        let nodes = s.grid.nodes();
        let mut buf = vec![Complex64::default(); cells * nv];
        buf.par_chunks_mut(cells).enumerate().for_each(|(i, field)| {
            for (c, z) in field.iter_mut().enumerate() {
                *z = Complex64::new(s.g[c * nv + i], 0.0);
            }
            self.fft.forward(field);
            let v = nodes[i];
            // an unpaired Nyquist mode gets the real factor cos(k v τ), keeping each axis
            // factor Hermitian so that real data stays real and reflections commute
            let ph: [Vec<Complex64>; 3] = [0, 1, 2].map(|a| {
                let n = d.n[a];
                k[a].iter()
                    .enumerate()
                    .map(|(m, &ka)| {
                        if n % 2 == 0 && m == n / 2 {
                            Complex64::new((ka * v[a] * tau).cos(), 0.0)
                        } else {
                            Complex64::from_polar(1.0, -ka * v[a] * tau)
                        }
                    })
                    .collect()
            });
            for (c, z) in field.iter_mut().enumerate() {
                let id = d.indices(c);
                *z *= ph[0][id[0]] * ph[1][id[1]] * ph[2][id[2]];
            }
            self.fft.inverse(field);
        });
        s.g.par_chunks_exact_mut(nv).enumerate().for_each(|(c, cell)| {
            for (i, x) in cell.iter_mut().enumerate() {
                *x = buf[i * cells + c].re;
            }
        });
    }

    fn relax_bgk(&mut self, s: &mut KineticState, dt: f64) -> Result<f64> {
        let nv = s.nv();
        let eps2 = s.epsilon * s.epsilon;
        let a = self.op.rate();
        let grid = s.grid.clone();
        let w = grid.weights();
        let mode = self.cfg.relaxation;
        let cellvol = s.domain.cell_volume();
        // 2-point Gauss–Legendre nodes on [0,1]
        let gl = [0.5 - 0.5 / 3f64.sqrt(), 0.5 + 0.5 / 3f64.sqrt()];
        let out: Vec<Result<(f64, [f64; 5])>> = s
            .g
            .par_chunks_exact_mut(nv)
            .zip(self.warm.par_iter())
            .map(|(cell, warm)| {
                let (coef, m) = fit_maxwellian(&grid, cell, *warm)?;
                let r: f64 = cell.iter().zip(w).map(|(g, w)| g * w).sum();
                let lam = a * r * dt / eps2;
                let factor = match mode {
                    Relaxation::Exact => (-lam).exp(),
                    Relaxation::CrankNicolson => (1.0 - 0.5 * lam) / (1.0 + 0.5 * lam),
                };
                // dissipation along G(s) = 𝓜 + (G−𝓜)φ(s), φ(1) = factor
                let mut e = 0.0;
                if factor > 0.0 {
                    let rate_ln = factor.ln();
                    for &sg in &gl {
                        let phi = (rate_ln * sg).exp();
                        let mut acc = 0.0;
                        for i in 0..nv {
                            let gi = m[i] + (cell[i] - m[i]) * phi;
                            if gi > 0.0 {
                                acc += w[i] * (gi - m[i]) * (gi / m[i]).ln();
                            }
                        }
                        e += 0.5 * a * r * acc;
                    }
                }
                for (x, mi) in cell.iter_mut().zip(&m) {
                    *x = mi + (*x - mi) * factor;
                }
                Ok((e * dt / eps2 * cellvol, coef))
            })
            .collect();
        let mut total = 0.0;
        for (o, wm) in out.into_iter().zip(self.warm.iter_mut()) {
            let (e, c) = o?;
            total += e;
            *wm = Some(c);
        }
        Ok(total)
    }

    /// G ← G + h Q(G,G)/(1 + hλ), h = dt/ε², λ ≥ the largest loss frequency in the cell.
    fn collide_penalized(&mut self, s: &mut KineticState, dt: f64) -> Result<f64> {
        let nv = s.nv();
        let h = dt / (s.epsilon * s.epsilon);
        let cellvol = s.domain.cell_volume();
        let mut total = 0.0;
        for c in 0..s.cells() {
            let cell = &mut s.g[c * nv..(c + 1) * nv];
            let (q, nu) = self.op.collide_with_frequency(cell)?;
            let lam = nu.iter().cloned().fold(0.0, f64::max);
            let heff = h / (1.0 + h * lam);
            let e0 = self.op.entropy_production(cell)?;
            for (x, qi) in cell.iter_mut().zip(&q) {
                *x += heff * qi;
            }
            let e1 = self.op.entropy_production(cell)?;
            // dissipation over the stage's effective relaxation time heff·ε²
            total += 0.5 * (e0 + e1) * heff * cellvol;
        }
        Ok(total)
    }
}

/// When to record diagnostics rows.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Schedule {
    /// Record every `every` steps (0: only at `times` and the end).
    pub every: usize,
    /// Times the run must stop at exactly and record.
    pub times: Vec<f64>,
    /// Evaluate H after every step to monitor monotonicity and the entropy inequality.
    pub track_entropy: bool,
}

#[derive(Debug, Clone, Default)]
pub struct TrajectoryReport {
    pub rows: Vec<DiagnosticRow>,
    pub steps: usize,
    pub max_halvings: usize,
    /// max over recorded steps of H(t) + (1/ε²)∫E − H(0).
    pub entropy_slack: f64,
    /// max over recorded steps of |H(t) + (1/ε²)∫E − H(0)|.
    pub entropy_defect: f64,
    /// H strictly decreased at every tracked step.
    pub h_strictly_decreasing: bool,
    /// Largest per-step change of the five invariants, relative to the mass.
    pub max_invariant_drift: f64,
    pub aborted: Option<String>,
}

/// Integrate to `t_end`, recording diagnostics rows; `observe` sees every recorded state.
/// A failing step ends the run and is reported in `aborted` with the rows so far.
pub fn simulate<F>(
    solver: &mut KineticSolver,
    state: &mut KineticState,
    ctx: &DiagnosticsContext,
    schedule: &Schedule,
    t_end: f64,
    mut observe: F,
) -> TrajectoryReport
where
    F: FnMut(&KineticState, &DiagnosticRow),
{
    let mut rep = TrajectoryReport {
        h_strictly_decreasing: true,
        ..Default::default()
    };
    let mut e_int = 0.0;
    let mut diss_int = 0.0;
    let (_, mut diss_prev) = hydro_energy(state, ctx.nu, ctx.kappa);
    let mut t_prev = state.time;
    let mut record = |s: &KineticState, e_int: f64, diss_int: f64, rep: &mut TrajectoryReport| -> bool {
        match ctx.row(s, e_int, diss_int) {
            Ok(r) => {
                observe(s, &r);
                rep.rows.push(r);
                true
            }
            Err(e) => {
                rep.aborted = Some(format!("diagnostics at t = {}: {e}", s.time));
                false
            }
        }
    };
    if !record(state, 0.0, 0.0, &mut rep) {
        return rep;
    }
    let mut stops: Vec<f64> = schedule
        .times
        .iter()
        .cloned()
        .filter(|t| *t > state.time && *t < t_end)
        .collect();
    stops.push(t_end);
    stops.sort_by(|a, b| a.partial_cmp(b).unwrap());
    stops.dedup();
    let mut h_prev = ctx.h_in;
    let tol = 1e-12 * t_end.max(1.0);
    for stop in stops {
        while state.time < stop - tol {
            let inv0 = state.invariants();
            let r = match solver.step_to(state, stop) {
                Ok(r) => r,
                Err(e) => {
                    rep.aborted = Some(format!("step at t = {}: {e}", state.time));
                    return rep;
                }
            };
            rep.steps += 1;
            rep.max_halvings = rep.max_halvings.max(r.halvings);
            e_int += r.entropy_production;
            let inv1 = state.invariants();
            let drift = (0..5)
                .map(|a| (inv1[a] - inv0[a]).abs())
                .fold(0.0, f64::max)
                / inv0[0].abs().max(f64::MIN_POSITIVE);
            rep.max_invariant_drift = rep.max_invariant_drift.max(drift);
            if schedule.track_entropy {
                let h = relative_entropy(state);
                if !(h < h_prev) {
                    rep.h_strictly_decreasing = false;
                }
                rep.entropy_slack = rep.entropy_slack.max(h + e_int - ctx.h_in);
                rep.entropy_defect = rep.entropy_defect.max((h + e_int - ctx.h_in).abs());
                h_prev = h;
            }
            let at_stop = state.time >= stop - tol;
            if at_stop || (schedule.every > 0 && rep.steps % schedule.every == 0) {
                let (_, d) = hydro_energy(state, ctx.nu, ctx.kappa);
                diss_int += 0.5 * (state.time - t_prev) * (diss_prev + d);
                diss_prev = d;
                t_prev = state.time;
                if at_stop {
                    state.time = stop;
                }
                if !record(state, e_int, diss_int, &mut rep) {
                    return rep;
                }
                if !schedule.track_entropy {
                    let h = rep.rows.last().map(|r| r.h).unwrap_or(h_prev);
                    rep.entropy_slack = rep.entropy_slack.max(h + e_int - ctx.h_in);
                    rep.entropy_defect = rep.entropy_defect.max((h + e_int - ctx.h_in).abs());
                }
            }
        }
    }
    rep
}

/// Taylor–Green velocity (sin x cos y, −cos x sin y, 0) scaled by `amp`.
pub fn taylor_green(domain: &Domain, amp: f64) -> [Vec<f64>; 3] {
    let sx = 2.0 * PI / domain.length[0];
    let sy = 2.0 * PI / domain.length[1];
    [
        domain.eval(|x| amp * (sx * x[0]).sin() * (sy * x[1]).cos()),
        domain.eval(|x| -amp * (sx * x[0]).cos() * (sy * x[1]).sin()),
        vec![0.0; domain.cells()],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collision::KernelSpec;

    fn setup(n: usize, eps: f64) -> (KineticState, CollisionOperator) {
        let grid = Arc::new(VelocityGrid::new(&GridSpec::gauss_hermite(6)).unwrap());
        let d = Domain::torus(n, n, 1).unwrap();
        let u = taylor_green(&d, 1.0);
        let th = vec![0.0; d.cells()];
        let s = init_perturbed_maxwellian(d, grid.clone(), &u, &th, eps, InitMode::Linearized).unwrap();
        let op = CollisionOperator::new(&KernelSpec::constant_frequency(1.0), grid).unwrap();
        (s, op)
    }

    #[test]
    fn equilibrium_is_fixed_point() {
        let grid = Arc::new(VelocityGrid::new(&GridSpec::gauss_hermite(6)).unwrap());
        let d = Domain::torus(4, 4, 1).unwrap();
        let mut s = KineticState::equilibrium(d, grid.clone(), 0.1).unwrap();
        let op = CollisionOperator::new(&KernelSpec::constant_frequency(1.0), grid).unwrap();
        let mut solver = KineticSolver::new(SolverConfig::default(), op, &s).unwrap();
        solver.step(&mut s).unwrap();
        assert!(s.g.iter().all(|x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn mass_conserved_and_moments() {
        let (mut s, op) = setup(8, 0.1);
        let m0 = s.invariants();
        let mom = s.fluid_moments();
        let u = taylor_green(&s.domain, 1.0);
        for c in 0..s.cells() {
            assert!((mom[c].u[0] - u[0][c]).abs() < 1e-12);
        }
        let mut solver = KineticSolver::new(SolverConfig::default(), op, &s).unwrap();
        for _ in 0..3 {
            solver.step(&mut s).unwrap();
        }
        let m1 = s.invariants();
        assert!(((m1[0] - m0[0]) / m0[0]).abs() < 1e-12);
        for a in 1..5 {
            assert!((m1[a] - m0[a]).abs() < 1e-10 * m0[0]);
        }
    }

    #[test]
    fn homogeneous_bgk_relaxation_is_exponential() {
        let grid = Arc::new(VelocityGrid::new(&GridSpec::gauss_hermite(6)).unwrap());
        let d = Domain::torus(1, 1, 1).unwrap();
        let mut s = KineticState::equilibrium(d, grid.clone(), 0.5).unwrap();
        s.g = grid.eval(|v| 1.0 + 0.1 * (v[0] * v[0] - 1.0) * (-0.1 * dot(v, v)).exp());
        let m = crate::collision::discrete_maxwellian(&grid, &s.g).unwrap();
        let op = CollisionOperator::new(&KernelSpec::constant_frequency(2.0), grid.clone()).unwrap();
        let dt = 0.05;
        let cfg = SolverConfig {
            dt: Some(dt),
            ..Default::default()
        };
        let mut solver = KineticSolver::new(cfg, op, &s).unwrap();
        let before: Vec<f64> = s.g.iter().zip(&m).map(|(g, m)| g - m).collect();
        solver.step(&mut s).unwrap();
        let r: f64 = grid.bracket(&s.g);
        let f = (-2.0 * r * dt / 0.25).exp();
        for i in 0..s.nv() {
            assert!((s.g[i] - m[i] - f * before[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn mirror_symmetry() {
        let (s, op) = setup(8, 0.1);
        let mut a = s.clone();
        let mut b = s.mirrored(0).unwrap();
        let mut sa = KineticSolver::new(SolverConfig::default(), op.clone(), &a).unwrap();
        let mut sb = KineticSolver::new(SolverConfig::default(), op, &b).unwrap();
        for _ in 0..3 {
            sa.step(&mut a).unwrap();
            sb.step(&mut b).unwrap();
        }
        let am = a.mirrored(0).unwrap();
        let md = am.g.iter().zip(&b.g).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(md < 1e-12, "{md}");
        assert!(am.g.iter().zip(&b.g).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn snapshot_roundtrip() {
        let (s, _) = setup(4, 0.1);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.snap");
        s.write_snapshot(&p).unwrap();
        let r = KineticState::read_snapshot(&p).unwrap();
        assert_eq!(r.g, s.g);
        assert_eq!(r.domain, s.domain);
        assert_eq!(r.epsilon, s.epsilon);
    }

    #[test]
    fn rejects_divergent_velocity() {
        let grid = Arc::new(VelocityGrid::new(&GridSpec::gauss_hermite(4)).unwrap());
        let d = Domain::torus(8, 8, 1).unwrap();
        let u = [d.eval(|x| x[0].sin()), vec![0.0; 64], vec![0.0; 64]];
        let r = init_perturbed_maxwellian(d, grid, &u, &[0.0; 64], 0.1, InitMode::Linearized);
        assert!(matches!(r, Err(Error::Divergence(_))));
    }
}
