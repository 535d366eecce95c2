//! Flat TOML run configuration shared by every CLI subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::collision::{KernelKind, KernelSpec};
use crate::error::{Error, Result};
use crate::kinetic_solver::{CollisionBackend, InitMode, Relaxation, Scheme, SolverConfig};
use crate::linearized::SolverOptions;
use crate::nsf_solver::NsfConfig;
use crate::spectral::Domain;
use crate::velocity_space::{GridSpec, QuadratureKind};

/// Initial data family for `simulate` and `sweep`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialData {
    /// Taylor–Green velocity with temperature θ_amp·sin x sin y (constant on streamlines).
    TaylorGreen,
    /// Spatially uniform sum of two Maxwellians shifted by ±bimodal_shift along v₁.
    Bimodal,
}

/// Every key is optional in the file; missing keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    // velocity grid
    pub nv: usize,
    pub v_max: f64,
    pub quadrature: QuadratureKind,
    pub sphere_order: usize,

    // kernel
    pub kernel: KernelKind,
    pub beta: f64,
    /// Rate a of the constant-frequency surrogate.
    pub frequency: f64,

    // space
    pub nx: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ny: Option<usize>,
    pub nz: usize,

    // kinetic run
    pub epsilon: f64,
    pub scheme: Scheme,
    pub backend: CollisionBackend,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    pub cfl: f64,
    pub t_end: f64,
    pub relaxation: Relaxation,
    pub init_mode: InitMode,
    pub initial: InitialData,
    pub u_amplitude: f64,
    pub theta_amplitude: f64,
    pub bimodal_shift: f64,
    pub max_halvings: usize,
    pub diagnostics_every: usize,
    pub track_entropy: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dump_dir: Option<PathBuf>,

    // diagnostics
    pub k_exponent: f64,
    /// Energy window above K(ε) kept in the defect table; negative disables defects.
    pub defect_window: f64,
    pub flux_split: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<PathBuf>,

    // linear algebra
    pub fredholm_tol: f64,
    pub fredholm_max_iter: usize,
    pub n_eigenvalues: usize,

    // NSF reference
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nsf_nx: Option<usize>,
    pub nsf_dt: f64,
    pub nsf_cfl: f64,
    /// Override ν; by default it comes from the kernel's transport coefficients.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,

    // sweep
    pub epsilons: Vec<f64>,
    pub comparison_times: Vec<f64>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            nv: 12,
            v_max: 6.0,
            quadrature: QuadratureKind::Uniform,
            sphere_order: 6,
            kernel: KernelKind::ConstantFrequency,
            beta: 0.0,
            frequency: 1.0,
            nx: 32,
            ny: None,
            nz: 1,
            epsilon: 0.1,
            scheme: Scheme::ImexBgk,
            backend: CollisionBackend::BgkSurrogate,
            dt: None,
            cfl: 0.5,
            t_end: 0.5,
            relaxation: Relaxation::CrankNicolson,
            init_mode: InitMode::ExactMaxwellian,
            initial: InitialData::TaylorGreen,
            u_amplitude: 1.0,
            theta_amplitude: 1.0,
            bimodal_shift: 1.5,
            max_halvings: 8,
            diagnostics_every: 0,
            track_entropy: false,
            dump_dir: None,
            k_exponent: 7.0,
            defect_window: 20.0,
            flux_split: true,
            snapshot: None,
            fredholm_tol: 1e-10,
            fredholm_max_iter: 5000,
            n_eigenvalues: 12,
            nsf_nx: None,
            nsf_dt: 1e-2,
            nsf_cfl: 1.0,
            nu: None,
            kappa: None,
            epsilons: vec![0.1, 0.05, 0.025],
            comparison_times: vec![0.25, 0.5],
            output_dir: None,
        }
    }
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: Config = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::from_toml_str(&s).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.nx == 0 || self.nz == 0 || self.ny == Some(0) || self.nsf_nx == Some(0) {
            return bad("spatial resolutions must be positive".into());
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad(format!("epsilon = {} outside (0,1)", self.epsilon));
        }
        if self.epsilons.iter().any(|e| !(*e > 0.0 && *e < 1.0)) {
            return bad(format!("epsilons {:?} must lie in (0,1)", self.epsilons));
        }
        if self.epsilons.windows(2).any(|w| !(w[1] < w[0])) {
            return bad(format!("epsilons {:?} must be strictly decreasing", self.epsilons));
        }
        if self.comparison_times.iter().any(|t| !(*t > 0.0)) || self.comparison_times.windows(2).any(|w| !(w[1] > w[0])) {
            return bad(format!(
                "comparison_times {:?} must be positive and increasing",
                self.comparison_times
            ));
        }
        if !(self.t_end >= 0.0) || !(self.nsf_dt > 0.0) || !(self.cfl > 0.0) {
            return bad("t_end, nsf_dt and cfl must be positive".into());
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0) {
                return bad(format!("dt = {dt} must be positive"));
            }
        }
        Ok(())
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec {
            n_per_axis: self.nv,
            v_max: self.v_max,
            sphere_order: self.sphere_order,
            quadrature_kind: self.quadrature,
        }
    }

    pub fn kernel_spec(&self) -> KernelSpec {
        KernelSpec {
            kind: self.kernel,
            beta: self.beta,
            frequency: self.frequency,
            sphere_order: None,
        }
    }

    pub fn domain(&self) -> Result<Domain> {
        Domain::torus(self.nx, self.ny.unwrap_or(self.nx), self.nz)
    }

    pub fn nsf_domain(&self) -> Result<Domain> {
        let n = self.nsf_nx.unwrap_or(self.nx);
        let ny = if self.ny.unwrap_or(self.nx) == 1 { 1 } else { n };
        Domain::torus(n, ny, self.nz)
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            scheme: self.scheme,
            backend: self.backend,
            dt: self.dt,
            cfl: self.cfl,
            t_end: self.t_end,
            bgk_frequency: self.frequency,
            relaxation: self.relaxation,
            max_halvings: self.max_halvings,
            dump_dir: self.dump_dir.clone(),
        }
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            tol: self.fredholm_tol,
            max_iter: self.fredholm_max_iter,
            ..SolverOptions::default()
        }
    }

    pub fn nsf_config(&self, t_end: f64) -> NsfConfig {
        NsfConfig {
            dt: self.nsf_dt,
            t_end,
            cfl: self.nsf_cfl,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = Config::default();
        let s = c.to_toml_string().unwrap();
        assert_eq!(Config::from_toml_str(&s).unwrap(), c);
        assert_eq!(Config::from_toml_str("").unwrap(), c);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Config::from_toml_str("no_such_key = 1").is_err());
        assert!(Config::from_toml_str("epsilons = [0.05, 0.1]").is_err());
        assert!(Config::from_toml_str("epsilon = 1.5").is_err());
        let c = Config::from_toml_str("kernel = \"hard_sphere\"\nnv = 8\ndt = 0.01").unwrap();
        assert_eq!(c.kernel, KernelKind::HardSphere);
        assert_eq!(c.dt, Some(0.01));
    }
}
