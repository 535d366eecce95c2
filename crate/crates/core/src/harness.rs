//! Run orchestration behind the CLI: the six subcommands, the ε-sweep against the
//! NSF reference, and their CSV/JSON outputs.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::collision::{CollisionOperator, KernelSpec};
use crate::config::{Config, InitialData};
use crate::diagnostics::{
    entropy_production, hydro_energy, identity1_residual, relative_entropy, Correctors, DiagnosticRow,
    DiagnosticsContext, TruncationProfile,
};
use crate::error::{Error, Result};
use crate::kinetic_solver::{
    init_perturbed_maxwellian, simulate, taylor_green, InitMode, KineticSolver, KineticState, Schedule,
    SolverConfig, TrajectoryReport,
};
use crate::linearized::{assemble_l, LinearizedOperator, SolverOptions, TransportCoefficients};
use crate::nsf_solver::{energy_balance, leray_project, run_nsf, EnergyRecord, HydroFields, NsfConfig, VectorField};
use crate::report::{write_json, Cell, Check, Report, Table};
use crate::spectral::{resample, Domain};
use crate::velocity_space::{relative_maxwellian, GridSpec, VelocityGrid};

/// Files written and predicates evaluated by one command.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub checks: Vec<Check>,
    pub files: Vec<PathBuf>,
}

impl Outcome {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

// ---------------------------------------------------------------------------
// initial data
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InitialSpec {
    pub kind: InitialData,
    pub mode: InitMode,
    pub u_amplitude: f64,
    pub theta_amplitude: f64,
    pub bimodal_shift: f64,
}

impl InitialSpec {
    pub fn from_config(c: &Config) -> Self {
        InitialSpec {
            kind: c.initial,
            mode: c.init_mode,
            u_amplitude: c.u_amplitude,
            theta_amplitude: c.theta_amplitude,
            bimodal_shift: c.bimodal_shift,
        }
    }

    /// Hydrodynamic initial fields (u_in, θ_in) on `domain`.
    pub fn fields(&self, domain: &Domain) -> (VectorField, Vec<f64>) {
        match self.kind {
            InitialData::TaylorGreen => {
                let sx = 2.0 * PI / domain.length[0];
                let sy = 2.0 * PI / domain.length[1];
                let th = self.theta_amplitude;
                (
                    taylor_green(domain, self.u_amplitude),
                    domain.eval(|x| th * (sx * x[0]).sin() * (sy * x[1]).sin()),
                )
            }
            InitialData::Bimodal => {
                let z = vec![0.0; domain.cells()];
                ([z.clone(), z.clone(), z.clone()], z)
            }
        }
    }

    pub fn state(&self, domain: Domain, grid: Arc<VelocityGrid>, epsilon: f64) -> Result<KineticState> {
        match self.kind {
            InitialData::TaylorGreen => {
                let (u, th) = self.fields(&domain);
                init_perturbed_maxwellian(domain, grid, &u, &th, epsilon, self.mode)
            }
            InitialData::Bimodal => {
                let c = self.bimodal_shift;
                let cell: Vec<f64> = grid
                    .nodes()
                    .iter()
                    .map(|&v| {
                        0.5 * (relative_maxwellian(1.0, [c, 0.0, 0.0], 1.0, v)
                            + relative_maxwellian(1.0, [-c, 0.0, 0.0], 1.0, v))
                    })
                    .collect();
                let mut s = KineticState::equilibrium(domain, grid, epsilon)?;
                let nv = s.nv();
                s.g.chunks_exact_mut(nv).for_each(|g| g.copy_from_slice(&cell));
                Ok(s)
            }
        }
    }
}

fn build_operator(c: &Config) -> Result<CollisionOperator> {
    let grid = Arc::new(VelocityGrid::new(&c.grid_spec())?);
    CollisionOperator::new(&c.kernel_spec(), grid)
}

/// ν and κ: the configured overrides, else the Fredholm values of the kernel.
fn viscosity(c: &Config, l: Option<&LinearizedOperator>, op: &CollisionOperator) -> Result<(f64, f64)> {
    if let (Some(nu), Some(kappa)) = (c.nu, c.kappa) {
        return Ok((nu, kappa));
    }
    let owned;
    let l = match l {
        Some(l) => l,
        None => {
            owned = assemble_l(op)?;
            &owned
        }
    };
    let tc = l.transport_coefficients(&c.solver_options())?;
    Ok((c.nu.unwrap_or(tc.nu), c.kappa.unwrap_or(tc.kappa)))
}

fn correctors(l: &LinearizedOperator, opts: &SolverOptions) -> Result<Correctors> {
    let sol = l.fredholm(opts)?;
    Ok(Correctors {
        a_hat: sol.a_hat,
        b_hat: sol.b_hat,
    })
}

fn out_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

fn finite_or_disabled(x: f64) -> bool {
    x.is_finite() || x.is_nan()
}

// ---------------------------------------------------------------------------
// transport-coeffs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TransportResults {
    #[serde(flatten)]
    pub coefficients: TransportCoefficients,
    pub gap: f64,
    pub a_minus: f64,
    pub a_plus: f64,
    pub symmetry_defect: f64,
}

pub fn transport_results(c: &Config) -> Result<TransportResults> {
    let op = build_operator(c)?;
    let l = assemble_l(&op)?;
    let coefficients = l.transport_coefficients(&c.solver_options())?;
    let gap = l.spectral_gap()?;
    let (a_minus, a_plus) = l.frequency_bounds();
    Ok(TransportResults {
        coefficients,
        gap,
        a_minus,
        a_plus,
        symmetry_defect: l.symmetry_defect(),
    })
}

pub fn cmd_transport_coeffs(c: &Config, out: &Path) -> Result<Outcome> {
    let r = transport_results(c)?;
    let tc = r.coefficients;
    let mut checks = vec![
        Check::gt("nu_positive", tc.nu, 0.0),
        Check::gt("kappa_positive", tc.kappa, 0.0),
        Check::gt("spectral_gap_positive", r.gap, 0.0),
        Check::le("nu_dual_relative", ((tc.nu - tc.nu_dual) / tc.nu).abs(), 1e-6),
        Check::le("kappa_dual_relative", ((tc.kappa - tc.kappa_dual) / tc.kappa).abs(), 1e-6),
    ];
    if c.kernel == crate::collision::KernelKind::ConstantFrequency {
        let a = c.frequency;
        checks.push(Check::le("nu_equals_inverse_rate", (tc.nu - 1.0 / a).abs(), 1e-8));
        checks.push(Check::le("kappa_equals_inverse_rate", (tc.kappa - 1.0 / a).abs(), 1e-8));
    }
    let mut t = Table::new(&[
        "kind", "beta", "n", "v_max", "nu", "kappa", "nu_dual", "kappa_dual", "gap", "a_minus", "a_plus",
    ]);
    t.push(vec![
        kind_name(c).into(),
        c.beta.into(),
        c.nv.into(),
        c.v_max.into(),
        tc.nu.into(),
        tc.kappa.into(),
        tc.nu_dual.into(),
        tc.kappa_dual.into(),
        r.gap.into(),
        r.a_minus.into(),
        r.a_plus.into(),
    ]);
    let csv = out_path(out, "transport_coeffs.csv");
    t.write(&csv)?;
    let json = out_path(out, "report.json");
    write_json(&json, &Report::new("transport-coeffs", c, r, checks.clone()))?;
    Ok(Outcome {
        checks,
        files: vec![csv, json],
    })
}

fn kind_name(c: &Config) -> String {
    serde_json::to_value(c.kernel)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

// ---------------------------------------------------------------------------
// spectrum
// ---------------------------------------------------------------------------

/// Dense eigen-solves are used up to this many velocity nodes; Lanczos beyond.
pub const DENSE_SPECTRUM_LIMIT: usize = 2000;

#[derive(Debug, Clone, Serialize)]
pub struct SpectrumResults {
    pub nodes: usize,
    pub method: &'static str,
    /// Lowest eigenvalues of L, ascending.
    pub eigenvalues: Vec<f64>,
    /// Lowest eigenvalue on (Ker L)^⊥.
    pub gap: f64,
    /// max ‖Lξ‖/‖ξ‖ over the five collision invariants.
    pub kernel_residual: f64,
    /// Number of eigenvalues below gap/2.
    pub kernel_dimension: usize,
    pub symmetry_defect: f64,
    pub min_eigenvalue: f64,
    /// max over probes of ‖Q(ξ,ξ) − ½L(ξ²)‖/‖½L(ξ²)‖.
    pub qkerl_defect: f64,
}

pub fn spectrum_results(c: &Config) -> Result<SpectrumResults> {
    let op = build_operator(c)?;
    let l = assemble_l(&op)?;
    let nn = l.len();
    let (method, eigenvalues) = if nn <= DENSE_SPECTRUM_LIMIT {
        ("dense", l.eigenvalues_dense())
    } else {
        let (vals, _) = l.lanczos(false, 600.min(nn), 1e-10)?;
        ("lanczos", vals)
    };
    let gap = l.spectral_gap()?;
    let kernel_residual = l
        .kernel_basis()
        .iter()
        .map(|xi| l.grid().norm(&l.apply(xi)) / l.grid().norm(xi))
        .fold(0.0, f64::max);
    let kernel_dimension = eigenvalues.iter().filter(|&&x| x < 0.5 * gap).count();
    let min_eigenvalue = eigenvalues.first().copied().unwrap_or(f64::NAN);
    let shown = c.n_eigenvalues.min(eigenvalues.len());
    Ok(SpectrumResults {
        nodes: nn,
        method,
        eigenvalues: eigenvalues[..shown].to_vec(),
        gap,
        kernel_residual,
        kernel_dimension,
        symmetry_defect: l.symmetry_defect(),
        min_eigenvalue,
        qkerl_defect: op.qkerl_defect(),
    })
}

pub fn cmd_spectrum(c: &Config, out: &Path) -> Result<Outcome> {
    let r = spectrum_results(c)?;
    let checks = vec![
        Check::le("kernel_residual", r.kernel_residual, 1e-8),
        Check::holds("kernel_dimension_is_5", r.kernel_dimension == 5),
        Check::gt("spectral_gap_positive", r.gap, 0.0),
        Check::le("symmetry_defect", r.symmetry_defect, 1e-10),
        Check::ge("min_eigenvalue", r.min_eigenvalue, -1e-10),
        Check::le("qkerl_defect", r.qkerl_defect, 1e-3),
    ];
    let mut t = Table::new(&["index", "eigenvalue"]);
    for (i, e) in r.eigenvalues.iter().enumerate() {
        t.push(vec![i.into(), (*e).into()]);
    }
    let csv = out_path(out, "spectrum.csv");
    t.write(&csv)?;
    let json = out_path(out, "report.json");
    write_json(&json, &Report::new("spectrum", c, &r, checks.clone()))?;
    Ok(Outcome {
        checks,
        files: vec![csv, json],
    })
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct SimulateResults {
    pub dt: f64,
    pub steps: usize,
    pub max_halvings: usize,
    pub h_initial: f64,
    pub h_final: f64,
    pub entropy_slack: f64,
    pub entropy_defect: f64,
    pub h_strictly_decreasing: bool,
    pub max_invariant_drift: f64,
    pub aborted: Option<String>,
}

/// Diagnostics context for a run from `initial` with the config's truncation settings.
fn diagnostics_context(
    c: &Config,
    initial: &KineticState,
    op: &CollisionOperator,
    nu: f64,
    kappa: f64,
    corr: Option<Correctors>,
) -> Result<DiagnosticsContext> {
    let window = (c.defect_window >= 0.0).then_some(c.defect_window);
    DiagnosticsContext::new(
        initial,
        op.clone(),
        nu,
        kappa,
        TruncationProfile::new(c.k_exponent)?,
        window,
        corr,
    )
}

/// Run the configured kinetic problem; returns the trajectory and the final state.
pub fn simulate_run(c: &Config) -> Result<(TrajectoryReport, KineticState, f64)> {
    let op = build_operator(c)?;
    let need_l = c.flux_split || c.nu.is_none() || c.kappa.is_none();
    let l = if need_l { Some(assemble_l(&op)?) } else { None };
    let (nu, kappa) = viscosity(c, l.as_ref(), &op)?;
    let corr = match (&l, c.flux_split) {
        (Some(l), true) => Some(correctors(l, &c.solver_options())?),
        _ => None,
    };
    let spec = InitialSpec::from_config(c);
    let mut state = spec.state(c.domain()?, op.grid().clone(), c.epsilon)?;
    let ctx = diagnostics_context(c, &state, &op, nu, kappa, corr)?;
    let mut solver = KineticSolver::new(c.solver_config(), op, &state)?;
    let schedule = Schedule {
        every: c.diagnostics_every,
        times: c.comparison_times.iter().cloned().filter(|t| *t < c.t_end).collect(),
        track_entropy: c.track_entropy,
    };
    let dt = solver.dt();
    let rep = simulate(&mut solver, &mut state, &ctx, &schedule, c.t_end, |_, _| {});
    Ok((rep, state, dt))
}

pub fn timeseries_table(rows: &[DiagnosticRow]) -> Table {
    let mut t = Table::new(&DiagnosticRow::HEADER);
    for r in rows {
        t.push(r.values().iter().map(|&x| Cell::Num(x)).collect());
    }
    t
}

pub fn cmd_simulate(c: &Config, out: &Path) -> Result<Outcome> {
    let (rep, state, dt) = simulate_run(c)?;
    let h_initial = rep.rows.first().map(|r| r.h).unwrap_or(f64::NAN);
    let h_final = rep.rows.last().map(|r| r.h).unwrap_or(f64::NAN);
    let res = SimulateResults {
        dt,
        steps: rep.steps,
        max_halvings: rep.max_halvings,
        h_initial,
        h_final,
        entropy_slack: rep.entropy_slack,
        entropy_defect: rep.entropy_defect,
        h_strictly_decreasing: rep.h_strictly_decreasing,
        max_invariant_drift: rep.max_invariant_drift,
        aborted: rep.aborted.clone(),
    };
    let mut checks = vec![
        Check::holds("completed", rep.aborted.is_none()),
        Check::holds(
            "rows_finite",
            rep.rows.iter().all(|r| r.values().iter().all(|x| finite_or_disabled(*x))),
        ),
        Check::le("invariant_drift_per_step", rep.max_invariant_drift, 1e-8),
    ];
    if c.track_entropy {
        checks.push(Check::holds("h_strictly_decreasing", rep.h_strictly_decreasing));
        checks.push(Check::le("entropy_defect", rep.entropy_defect, 1e-3 * h_initial));
    }
    let csv = out_path(out, "timeseries.csv");
    timeseries_table(&rep.rows).write(&csv)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let snap = out_path(out, "state_final.hlsnap");
    state.write_snapshot(&snap)?;
    let json = out_path(out, "report.json");
    write_json(&json, &Report::new("simulate", c, &res, checks.clone()))?;
    Ok(Outcome {
        checks,
        files: vec![csv, snap, json],
    })
}

// ---------------------------------------------------------------------------
// nsf
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct NsfResults {
    pub nu: f64,
    pub kappa: f64,
    pub energy_balance: f64,
    /// max_t |E_kin(t)/E_kin(0) − e^{−4νt}| for pure Taylor–Green data, else null.
    pub taylor_green_decay_error: Option<f64>,
    pub series: Vec<EnergyRecord>,
}

pub fn nsf_fields(c: &Config, nu: f64, kappa: f64) -> Result<HydroFields> {
    let d = c.nsf_domain()?;
    let (u, th) = InitialSpec::from_config(c).fields(&d);
    let mut f = HydroFields::zeros(d, nu, kappa);
    f.u = u;
    f.theta = th;
    Ok(f)
}

pub fn nsf_results(c: &Config) -> Result<NsfResults> {
    let (nu, kappa) = match (c.nu, c.kappa) {
        (Some(a), Some(b)) => (a, b),
        _ => viscosity(c, None, &build_operator(c)?)?,
    };
    let mut f = nsf_fields(c, nu, kappa)?;
    let ek0 = f.kinetic_energy();
    let mut series = vec![EnergyRecord {
        t: 0.0,
        energy: f.energy(),
        dissipation: f.dissipation(),
    }];
    let mut tg_err: f64 = 0.0;
    let steps = (c.t_end / c.nsf_dt).round().max(0.0) as usize;
    let solver = crate::nsf_solver::NsfSolver::new(f.domain);
    for s in 0..steps {
        let target = (s + 1) as f64 * c.nsf_dt;
        let dt = target - f.time;
        solver.step(&mut f, dt, c.nsf_cfl)?;
        series.push(EnergyRecord {
            t: f.time,
            energy: f.energy(),
            dissipation: f.dissipation(),
        });
        if ek0 > 0.0 {
            tg_err = tg_err.max((f.kinetic_energy() / ek0 - (-4.0 * nu * f.time).exp()).abs());
        }
    }
    let pure_tg = c.initial == InitialData::TaylorGreen && c.theta_amplitude == 0.0 && c.u_amplitude != 0.0;
    Ok(NsfResults {
        nu,
        kappa,
        energy_balance: energy_balance(&series),
        taylor_green_decay_error: pure_tg.then_some(tg_err),
        series,
    })
}

pub fn cmd_nsf(c: &Config, out: &Path) -> Result<Outcome> {
    let r = nsf_results(c)?;
    let mut checks = vec![Check::le("energy_balance", r.energy_balance, 1e-6)];
    if let Some(e) = r.taylor_green_decay_error {
        checks.push(Check::le("taylor_green_decay", e, 1e-4));
    }
    let mut t = Table::new(&["t", "energy", "dissipation"]);
    for s in &r.series {
        t.push(vec![s.t.into(), s.energy.into(), s.dissipation.into()]);
    }
    let csv = out_path(out, "energy.csv");
    t.write(&csv)?;
    let json = out_path(out, "report.json");
    write_json(&json, &Report::new("nsf", c, &r, checks.clone()))?;
    Ok(Outcome {
        checks,
        files: vec![csv, json],
    })
}

// ---------------------------------------------------------------------------
// diagnose
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct DiagnoseResults {
    pub snapshot: PathBuf,
    pub epsilon: f64,
    pub time: f64,
    pub invariants: [f64; 5],
    pub relative_entropy: f64,
    /// ∫E(F)dx.
    pub entropy_production: f64,
    pub hydro_energy: f64,
    pub hydro_dissipation: f64,
    pub identity1_residual: f64,
    pub row: DiagnosticRow,
}

pub fn diagnose_results(c: &Config) -> Result<DiagnoseResults> {
    let path = c
        .snapshot
        .clone()
        .ok_or_else(|| Error::Config("diagnose needs the `snapshot` key".into()))?;
    let s = KineticState::read_snapshot(&path)?;
    let op = CollisionOperator::new(&c.kernel_spec(), s.grid.clone())?;
    let need_l = c.flux_split || c.nu.is_none() || c.kappa.is_none();
    let l = if need_l { Some(assemble_l(&op)?) } else { None };
    let (nu, kappa) = viscosity(c, l.as_ref(), &op)?;
    let corr = match (&l, c.flux_split) {
        (Some(l), true) => Some(correctors(l, &c.solver_options())?),
        _ => None,
    };
    let ctx = diagnostics_context(c, &s, &op, nu, kappa, corr)?;
    let row = ctx.row(&s, f64::NAN, f64::NAN)?;
    let ep: f64 = entropy_production(&s, &op)?.iter().sum::<f64>() * s.domain.cell_volume();
    let (e, d) = hydro_energy(&s, nu, kappa);
    Ok(DiagnoseResults {
        snapshot: path,
        epsilon: s.epsilon,
        time: s.time,
        invariants: s.invariants(),
        relative_entropy: relative_entropy(&s),
        entropy_production: ep,
        hydro_energy: e,
        hydro_dissipation: d,
        identity1_residual: identity1_residual(&s),
        row,
    })
}

pub fn cmd_diagnose(c: &Config, out: &Path) -> Result<Outcome> {
    let r = diagnose_results(c)?;
    let mut vals = vec![
        r.relative_entropy,
        r.entropy_production,
        r.hydro_energy,
        r.hydro_dissipation,
        r.identity1_residual,
    ];
    vals.extend(r.invariants);
    let checks = vec![
        Check::holds("functionals_finite", vals.iter().all(|x| x.is_finite())),
        Check::ge("relative_entropy_nonnegative", r.relative_entropy, 0.0),
        Check::ge("entropy_production_nonnegative", r.entropy_production, 0.0),
    ];
    let csv = out_path(out, "diagnostics.csv");
    timeseries_table(std::slice::from_ref(&r.row)).write(&csv)?;
    let json = out_path(out, "report.json");
    write_json(&json, &Report::new("diagnose", c, &r, checks.clone()))?;
    Ok(Outcome {
        checks,
        files: vec![csv, json],
    })
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct SweepConfig {
    /// Strictly decreasing, in (0,1).
    pub epsilons: Vec<f64>,
    pub initial: InitialSpec,
    pub grid: GridSpec,
    pub kernel: KernelSpec,
    pub domain: Domain,
    pub solver: SolverConfig,
    pub nsf_domain: Domain,
    pub nsf_dt: f64,
    pub nsf_cfl: f64,
    pub comparison_times: Vec<f64>,
    /// Diagnostics row cadence in steps (0: comparison times only).
    pub diagnostics_every: usize,
    #[serde(skip)]
    pub base: Config,
    pub output_dir: Option<PathBuf>,
}

impl SweepConfig {
    pub fn from_config(c: &Config) -> Result<Self> {
        c.validate()?;
        if c.comparison_times.is_empty() {
            return Err(Error::Config("sweep needs comparison_times".into()));
        }
        Ok(SweepConfig {
            epsilons: c.epsilons.clone(),
            initial: InitialSpec::from_config(c),
            grid: c.grid_spec(),
            kernel: c.kernel_spec(),
            domain: c.domain()?,
            solver: c.solver_config(),
            nsf_domain: c.nsf_domain()?,
            nsf_dt: c.nsf_dt,
            nsf_cfl: c.nsf_cfl,
            comparison_times: c.comparison_times.clone(),
            diagnostics_every: c.diagnostics_every,
            base: c.clone(),
            output_dir: c.output_dir.clone(),
        })
    }
}

/// Kinetic-vs-NSF comparison at one time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ComparisonRecord {
    pub t: f64,
    /// ‖P⟨v g_ε⟩ − u_NSF‖_{L²}.
    pub u_error: f64,
    /// ‖θ_ε − θ_NSF‖_{L²}, θ_ε = ⟨(⅕|v|² − 1) g_ε⟩.
    pub theta_error: f64,
    pub boussinesq: f64,
    #[serde(rename = "defect_v_L1")]
    pub defect_v_l1: f64,
    #[serde(rename = "defect_e_L1")]
    pub defect_e_l1: f64,
    #[serde(rename = "flux_remainder_A")]
    pub flux_remainder_a: f64,
    #[serde(rename = "flux_remainder_B")]
    pub flux_remainder_b: f64,
}

impl ComparisonRecord {
    pub const FIELDS: [&'static str; 8] = [
        "t",
        "u_error",
        "theta_error",
        "boussinesq",
        "defect_v_L1",
        "defect_e_L1",
        "flux_remainder_A",
        "flux_remainder_B",
    ];
    fn values(&self) -> [f64; 8] {
        [
            self.t,
            self.u_error,
            self.theta_error,
            self.boussinesq,
            self.defect_v_l1,
            self.defect_e_l1,
            self.flux_remainder_a,
            self.flux_remainder_b,
        ]
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpsilonRun {
    pub epsilon: f64,
    pub dt: f64,
    pub steps: usize,
    pub records: Vec<ComparisonRecord>,
    /// (t, H) at every recorded row.
    pub entropy: Vec<[f64; 2]>,
    /// sup over comparison times of each record field (t excluded).
    pub sup: ComparisonRecord,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub nu: f64,
    pub kappa: f64,
    pub runs: Vec<EpsilonRun>,
    /// Least-squares slope of log sup-error against log ε.
    pub order_u: f64,
    pub order_theta: f64,
    /// sup u-error ratio between consecutive ε.
    pub ratios_u: Vec<f64>,
}

/// NSF reference fields (u, θ) at the comparison times, on the kinetic grid.
fn nsf_reference(sc: &SweepConfig, nu: f64, kappa: f64) -> Result<Vec<(VectorField, Vec<f64>)>> {
    let (u, th) = sc.initial.fields(&sc.nsf_domain);
    let mut f = HydroFields::zeros(sc.nsf_domain, nu, kappa);
    f.u = u;
    f.theta = th;
    let mut out = Vec::with_capacity(sc.comparison_times.len());
    for &t in &sc.comparison_times {
        run_nsf(
            &mut f,
            &NsfConfig {
                dt: sc.nsf_dt,
                t_end: t,
                cfl: sc.nsf_cfl,
            },
        )?;
        let u: Vec<Vec<f64>> = (0..3)
            .map(|a| resample(&sc.nsf_domain, &f.u[a], &sc.domain))
            .collect::<Result<_>>()?;
        let th = resample(&sc.nsf_domain, &f.theta, &sc.domain)?;
        out.push(([u[0].clone(), u[1].clone(), u[2].clone()], th));
    }
    Ok(out)
}

fn compare(s: &KineticState, reference: &(VectorField, Vec<f64>)) -> (f64, f64) {
    let d = &s.domain;
    let m = s.fluid_moments();
    let raw: VectorField = [0, 1, 2].map(|a| m.iter().map(|h| h.u[a]).collect());
    let pu = leray_project(d, &raw);
    let u_err = (0..3)
        .map(|a| {
            let diff: Vec<f64> = pu[a].iter().zip(&reference.0[a]).map(|(x, y)| x - y).collect();
            d.l2_norm(&diff).powi(2)
        })
        .sum::<f64>()
        .sqrt();
    let th: Vec<f64> = m
        .iter()
        .zip(&reference.1)
        .map(|(h, r)| (3.0 * h.theta - 2.0 * h.rho) / 5.0 - r)
        .collect();
    (u_err, d.l2_norm(&th))
}

fn run_epsilon(
    sc: &SweepConfig,
    eps: f64,
    op: &CollisionOperator,
    nu: f64,
    kappa: f64,
    corr: Option<Correctors>,
    refs: &[(VectorField, Vec<f64>)],
) -> EpsilonRun {
    let mut run = EpsilonRun {
        epsilon: eps,
        dt: f64::NAN,
        steps: 0,
        records: Vec::new(),
        entropy: Vec::new(),
        sup: nan_record(),
        error: None,
    };
    let res = (|| -> Result<()> {
        let mut state = sc.initial.state(sc.domain, op.grid().clone(), eps)?;
        let ctx = diagnostics_context(&sc.base, &state, op, nu, kappa, corr)?;
        let mut solver = KineticSolver::new(sc.solver.clone(), op.clone(), &state)?;
        run.dt = solver.dt();
        let schedule = Schedule {
            every: sc.diagnostics_every,
            times: sc.comparison_times.clone(),
            track_entropy: false,
        };
        let t_end = *sc.comparison_times.last().expect("validated non-empty");
        let times = &sc.comparison_times;
        let mut records = Vec::new();
        let mut entropy = Vec::new();
        let rep = simulate(&mut solver, &mut state, &ctx, &schedule, t_end, |s, row| {
            entropy.push([row.t, row.h]);
            if let Some(k) = times.iter().position(|t| (t - s.time).abs() <= 1e-9 * t.max(1.0)) {
                let (u_error, theta_error) = compare(s, &refs[k]);
                records.push(ComparisonRecord {
                    t: s.time,
                    u_error,
                    theta_error,
                    boussinesq: row.boussinesq,
                    defect_v_l1: row.defect_v_l1,
                    defect_e_l1: row.defect_e_l1,
                    flux_remainder_a: row.flux_remainder_a,
                    flux_remainder_b: row.flux_remainder_b,
                });
            }
        });
        run.steps = rep.steps;
        run.records = records;
        run.entropy = entropy;
        if let Some(msg) = rep.aborted {
            return Err(Error::InvalidParameter(msg));
        }
        Ok(())
    })();
    if let Err(e) = res {
        run.error = Some(e.to_string());
    }
    run.sup = sup_record(&run.records);
    run
}

fn nan_record() -> ComparisonRecord {
    ComparisonRecord {
        t: f64::NAN,
        u_error: f64::NAN,
        theta_error: f64::NAN,
        boussinesq: f64::NAN,
        defect_v_l1: f64::NAN,
        defect_e_l1: f64::NAN,
        flux_remainder_a: f64::NAN,
        flux_remainder_b: f64::NAN,
    }
}

fn sup_record(recs: &[ComparisonRecord]) -> ComparisonRecord {
    let Some(last) = recs.last() else {
        return nan_record();
    };
    let sup = |f: fn(&ComparisonRecord) -> f64| recs.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
    ComparisonRecord {
        t: last.t,
        u_error: sup(|r| r.u_error),
        theta_error: sup(|r| r.theta_error),
        boussinesq: sup(|r| r.boussinesq),
        defect_v_l1: sup(|r| r.defect_v_l1),
        defect_e_l1: sup(|r| r.defect_e_l1),
        flux_remainder_a: sup(|r| r.flux_remainder_a),
        flux_remainder_b: sup(|r| r.flux_remainder_b),
    }
}

/// Least-squares slope of ln y against ln x.
pub fn fit_order(x: &[f64], y: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0 && b.is_finite())
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

pub fn run_sweep(sc: &SweepConfig) -> Result<SweepReport> {
    let grid = Arc::new(VelocityGrid::new(&sc.grid)?);
    let op = CollisionOperator::new(&sc.kernel, grid)?;
    let l = assemble_l(&op)?;
    let (nu, kappa) = viscosity(&sc.base, Some(&l), &op)?;
    let corr = if sc.base.flux_split {
        Some(correctors(&l, &sc.base.solver_options())?)
    } else {
        None
    };
    let refs = nsf_reference(sc, nu, kappa)?;
    let runs: Vec<EpsilonRun> = sc
        .epsilons
        .par_iter()
        .map(|&eps| run_epsilon(sc, eps, &op, nu, kappa, corr.clone(), &refs))
        .collect();
    let eps: Vec<f64> = runs.iter().map(|r| r.epsilon).collect();
    let su: Vec<f64> = runs.iter().map(|r| r.sup.u_error).collect();
    let st: Vec<f64> = runs.iter().map(|r| r.sup.theta_error).collect();
    Ok(SweepReport {
        nu,
        kappa,
        order_u: fit_order(&eps, &su),
        order_theta: fit_order(&eps, &st),
        ratios_u: su.windows(2).map(|w| w[0] / w[1]).collect(),
        runs,
    })
}

fn decreasing(xs: &[f64]) -> bool {
    xs.iter().all(|x| x.is_finite()) && xs.windows(2).all(|w| w[1] < w[0])
}

/// Predicates of the sweep: first-order velocity convergence and decreasing
/// Boussinesq, defect and flux-remainder norms.
pub fn sweep_checks(r: &SweepReport) -> Vec<Check> {
    let mut checks = vec![Check::holds(
        "all_runs_completed",
        r.runs.iter().all(|x| x.error.is_none()),
    )];
    let col = |f: fn(&ComparisonRecord) -> f64| r.runs.iter().map(|x| f(&x.sup)).collect::<Vec<f64>>();
    checks.push(Check::holds("u_error_decreasing", decreasing(&col(|s| s.u_error))));
    for (k, q) in r.ratios_u.iter().enumerate() {
        let name = format!("u_error_ratio[{}/{}]", r.runs[k].epsilon, r.runs[k + 1].epsilon);
        checks.push(Check {
            name,
            value: *q,
            bound: "in [1.6, 2.6]".into(),
            pass: (1.6..=2.6).contains(q),
        });
    }
    checks.push(Check::holds("boussinesq_decreasing", decreasing(&col(|s| s.boussinesq))));
    checks.push(Check::holds("defect_v_decreasing", decreasing(&col(|s| s.defect_v_l1))));
    checks.push(Check::holds("flux_remainder_A_decreasing", decreasing(&col(|s| s.flux_remainder_a))));
    checks.push(Check::holds("flux_remainder_B_decreasing", decreasing(&col(|s| s.flux_remainder_b))));
    checks
}

impl SweepReport {
    /// Per-ε, per-time comparison table.
    pub fn table(&self) -> Table {
        let mut header = vec!["epsilon"];
        header.extend(ComparisonRecord::FIELDS);
        let mut t = Table::new(&header);
        for run in &self.runs {
            for rec in &run.records {
                let mut row = vec![Cell::Num(run.epsilon)];
                row.extend(rec.values().iter().map(|&x| Cell::Num(x)));
                t.push(row);
            }
        }
        t
    }

    /// Write `sweep.csv` or `report.json` into `dir`.
    pub fn emit(&self, dir: &Path, format: Format, config: &Config) -> Result<PathBuf> {
        match format {
            Format::Csv => {
                let p = dir.join("sweep.csv");
                self.table().write(&p)?;
                Ok(p)
            }
            Format::Json => {
                let p = dir.join("report.json");
                write_json(&p, &Report::new("sweep", config, self, sweep_checks(self)))?;
                Ok(p)
            }
        }
    }
}

pub fn cmd_sweep(c: &Config, out: &Path) -> Result<Outcome> {
    let sc = SweepConfig::from_config(c)?;
    let r = run_sweep(&sc)?;
    let csv = r.emit(out, Format::Csv, c)?;
    let json = r.emit(out, Format::Json, c)?;
    Ok(Outcome {
        checks: sweep_checks(&r),
        files: vec![csv, json],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_fit() {
        let x = [0.1, 0.05, 0.025];
        let y: Vec<f64> = x.iter().map(|e| 3.0 * e * e).collect();
        assert!((fit_order(&x, &y) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn sup_record_is_componentwise() {
        let mut a = nan_record();
        a.t = 0.1;
        a.u_error = 2.0;
        a.boussinesq = 1.0;
        let mut b = a;
        b.t = 0.2;
        b.u_error = 1.0;
        b.boussinesq = 3.0;
        let s = sup_record(&[a, b]);
        assert_eq!((s.t, s.u_error, s.boussinesq), (0.2, 2.0, 3.0));
    }

    #[test]
    fn empty_sweep_is_header_only() {
        let r = SweepReport {
            nu: 1.0,
            kappa: 1.0,
            runs: vec![],
            order_u: f64::NAN,
            order_theta: f64::NAN,
            ratios_u: vec![],
        };
        assert_eq!(
            r.table().render(),
            "epsilon,t,u_error,theta_error,boussinesq,defect_v_L1,defect_e_L1,flux_remainder_A,flux_remainder_B\n"
        );
    }
}
