//! Python bindings: configs, velocity grids, the transport/spectrum/NSF computations and
//! the CLI commands. Structured results come back as plain dicts.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use hydrolimit::collision::{normalize_mu, CollisionKernel};
use hydrolimit::config::Config as CoreConfig;
use hydrolimit::harness::{self, Outcome};
use hydrolimit::report::to_json;
use hydrolimit::velocity_space::{GridSpec, VelocityGrid as CoreGrid};

create_exception!(hydrolimit_py, HydrolimitError, PyException);

fn err(e: hydrolimit::Error) -> PyErr {
    HydrolimitError::new_err(e.to_string())
}

/// serde value → Python object through the json module.
fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let s = to_json(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (s,))
}

/// Flat run configuration; every key has a default.
#[pyclass(module = "hydrolimit_py", name = "Config")]
struct Config {
    inner: CoreConfig,
}

#[pymethods]
impl Config {
    #[new]
    #[pyo3(signature = (toml = None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(s) => CoreConfig::from_toml_str(s).map_err(err)?,
            None => CoreConfig::default(),
        };
        Ok(Config { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Config {
            inner: CoreConfig::load(&path).map_err(err)?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml_string().map_err(err)
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(kernel={:?}, nv={}, nx={}, epsilon={})",
            self.inner.kernel, self.inner.nv, self.inner.nx, self.inner.epsilon
        )
    }
}

/// Tensor velocity lattice with unit-mass Gaussian weights.
#[pyclass(module = "hydrolimit_py", name = "VelocityGrid")]
struct VelocityGrid {
    inner: Arc<CoreGrid>,
}

#[pymethods]
impl VelocityGrid {
    #[new]
    #[pyo3(signature = (n, v_max = 6.0, quadrature = "uniform"))]
    fn new(n: usize, v_max: f64, quadrature: &str) -> PyResult<Self> {
        let spec = match quadrature {
            "uniform" => GridSpec::uniform(n, v_max),
            "gauss_hermite" => GridSpec::gauss_hermite(n),
            other => return Err(PyValueError::new_err(format!("unknown quadrature {other:?}"))),
        };
        Ok(VelocityGrid {
            inner: Arc::new(CoreGrid::new(&spec).map_err(err)?),
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn nodes(&self) -> Vec<(f64, f64, f64)> {
        self.inner.nodes().iter().map(|v| (v[0], v[1], v[2])).collect()
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights().to_vec()
    }

    /// ⟨φ⟩ against the weights.
    fn bracket(&self, phi: Vec<f64>) -> PyResult<f64> {
        if phi.len() != self.inner.len() {
            return Err(PyValueError::new_err("length does not match the grid"));
        }
        Ok(self.inner.bracket(&phi))
    }

    /// Relative Maxwellian M_{ρ,u,θ}/M at the nodes.
    fn maxwellian(&self, rho: f64, u: (f64, f64, f64), theta: f64) -> PyResult<Vec<f64>> {
        self.inner
            .maxwellian_relative(rho, [u.0, u.1, u.2], theta)
            .map_err(err)
    }
}

/// ν, κ (direct and dual), spectral gap and frequency bounds.
#[pyfunction]
fn transport_coefficients<'py>(py: Python<'py>, config: &Config) -> PyResult<Bound<'py, PyAny>> {
    let c = config.inner.clone();
    let r = py.detach(move || harness::transport_results(&c)).map_err(err)?;
    to_py(py, &r)
}

/// Low spectrum of L with its kernel, symmetry and QKerL diagnostics.
#[pyfunction]
fn spectrum<'py>(py: Python<'py>, config: &Config) -> PyResult<Bound<'py, PyAny>> {
    let c = config.inner.clone();
    let r = py.detach(move || harness::spectrum_results(&c)).map_err(err)?;
    to_py(py, &r)
}

/// NSF reference run: energy series and balance.
#[pyfunction]
fn nsf<'py>(py: Python<'py>, config: &Config) -> PyResult<Bound<'py, PyAny>> {
    let c = config.inner.clone();
    let r = py.detach(move || harness::nsf_results(&c)).map_err(err)?;
    to_py(py, &r)
}

/// Z for the configured kernel on the configured velocity grid.
#[pyfunction]
fn collision_normalization(py: Python<'_>, config: &Config) -> PyResult<f64> {
    let c = config.inner.clone();
    py.detach(move || {
        let k = CollisionKernel::new(&c.kernel_spec())?;
        let g = CoreGrid::new(&c.grid_spec())?;
        Ok(normalize_mu(&k, &g))
    })
    .map_err(err)
}

/// (tail, asymptotic) for ∫_{|z|²>R} |z|^p G_N dz.
#[pyfunction]
fn gaussian_tail(p: usize, n: usize, r: f64) -> PyResult<(f64, f64)> {
    hydrolimit::velocity_space::gaussian_tail(p, n, r).map_err(err)
}

/// Least-squares slope of log y against log x.
#[pyfunction]
fn fit_order(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(PyValueError::new_err("need two equal-length sequences of at least two points"));
    }
    Ok(harness::fit_order(&x, &y))
}

/// Run a CLI subcommand; returns {"pass", "checks", "files"}.
#[pyfunction]
fn run<'py>(py: Python<'py>, command: &str, config: &Config, output: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let cmd: fn(&CoreConfig, &std::path::Path) -> hydrolimit::Result<Outcome> = match command {
        "transport-coeffs" => harness::cmd_transport_coeffs,
        "spectrum" => harness::cmd_spectrum,
        "simulate" => harness::cmd_simulate,
        "nsf" => harness::cmd_nsf,
        "diagnose" => harness::cmd_diagnose,
        "sweep" => harness::cmd_sweep,
        other => return Err(PyValueError::new_err(format!("unknown command {other:?}"))),
    };
    let c = config.inner.clone();
    let o = py.detach(move || cmd(&c, &output)).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("pass", o.pass())?;
    d.set_item("checks", to_py(py, &o.checks)?)?;
    d.set_item("files", o.files.iter().map(|p| p.display().to_string()).collect::<Vec<_>>())?;
    Ok(d.into_any())
}

/// JSON schema of report.json.
#[pyfunction]
fn report_schema() -> &'static str {
    hydrolimit::report::SCHEMA
}

#[pymodule]
fn hydrolimit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("HydrolimitError", m.py().get_type::<HydrolimitError>())?;
    m.add_class::<Config>()?;
    m.add_class::<VelocityGrid>()?;
    m.add_function(wrap_pyfunction!(transport_coefficients, m)?)?;
    m.add_function(wrap_pyfunction!(spectrum, m)?)?;
    m.add_function(wrap_pyfunction!(nsf, m)?)?;
    m.add_function(wrap_pyfunction!(collision_normalization, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_tail, m)?)?;
    m.add_function(wrap_pyfunction!(fit_order, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(report_schema, m)?)?;
    Ok(())
}
