//! Python bindings: potentials, models, eigenvalue and eigenfunction queries,
//! and the run/scan pipeline.

use std::path::{Path, PathBuf};

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use spectral_lab::cheese::build_first_cheese;
use spectral_lab::config::RunConfig;
use spectral_lab::curves::{solve_kappa, window_half_width};
use spectral_lab::eigenfunction::{bloch_eigenfunction, BlochEigenfunction, EigenRoute};
use spectral_lab::lattice::DualIndex;
use spectral_lab::model::{Model, Operator, Params};
use spectral_lab::oracle::{oracle_spectrum, Route};
use spectral_lab::pipeline::{run_pipeline, run_scan};
use spectral_lab::potential::PotentialSpec;
use spectral_lab::series::{eigenvalue_series, Contour};
use spectral_lab::LabError as CoreError;

create_exception!(
    spectral_lab,
    LabError,
    PyException,
    "Failure reported by the spectral-lab core."
);

fn py_err(e: CoreError) -> PyErr {
    LabError::new_err((e.to_string(), e.exit_code()))
}

fn json_value<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn to_json<T: serde::Serialize>(value: &T) -> PyResult<String> {
    serde_json::to_string(value).map_err(|e| py_err(e.into()))
}

#[pyclass(name = "Potential", module = "spectral_lab", from_py_object)]
#[derive(Clone)]
struct PyPotential {
    spec: PotentialSpec,
}

#[pymethods]
impl PyPotential {
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        PotentialSpec::from_toml_str(text)
            .map(|spec| Self { spec })
            .map_err(py_err)
    }

    #[staticmethod]
    fn from_path(path: PathBuf) -> PyResult<Self> {
        PotentialSpec::from_path(&path)
            .map(|spec| Self { spec })
            .map_err(py_err)
    }

    #[staticmethod]
    #[pyo3(signature = (d1 = std::f64::consts::TAU, d2 = std::f64::consts::TAU))]
    fn free(d1: f64, d2: f64) -> Self {
        Self {
            spec: PotentialSpec::free(d1, d2),
        }
    }

    fn to_toml(&self) -> PyResult<String> {
        self.spec.to_toml_string().map_err(py_err)
    }

    /// Sum of coefficient moduli over scales `lo..=hi`.
    fn norm(&self, lo: u32, hi: u32) -> f64 {
        self.spec.norm_range(lo, hi)
    }

    #[getter]
    fn periods(&self) -> (f64, f64) {
        (self.spec.d1, self.spec.d2)
    }

    #[getter]
    fn max_scale(&self) -> u32 {
        self.spec.max_scale()
    }
}

#[pyclass(name = "Eigenfunction", module = "spectral_lab", frozen)]
struct PyEigenfunction {
    inner: BlochEigenfunction,
}

#[pymethods]
impl PyEigenfunction {
    #[getter]
    fn step(&self) -> usize {
        self.inner.step
    }

    #[getter]
    fn eigenvalue(&self) -> f64 {
        self.inner.eigenvalue
    }

    #[getter]
    fn quasimomentum(&self) -> (f64, f64) {
        (self.inner.t[0], self.inner.t[1])
    }

    #[getter]
    fn residual(&self) -> f64 {
        self.inner.residual
    }

    #[getter]
    fn overlap(&self) -> Option<f64> {
        self.inner.overlap
    }

    fn norm(&self) -> f64 {
        self.inner.norm()
    }

    /// Fourier coefficients keyed by the dual index relative to the leading plane wave.
    fn coefficients(&self) -> Vec<((i64, i64), (f64, f64))> {
        let j = self.inner.j;
        self.inner
            .coeffs
            .iter()
            .map(|(m, c)| (((*m - j).0, (*m - j).1), (c.re, c.im)))
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Eigenfunction(step={}, eigenvalue={}, terms={})",
            self.inner.step,
            self.inner.eigenvalue,
            self.inner.coeffs.len()
        )
    }
}

#[pyclass(name = "Model", module = "spectral_lab", frozen)]
struct PyModel {
    model: Model,
}

fn parse_route(route: &str) -> PyResult<EigenRoute> {
    match route {
        "oracle" => Ok(EigenRoute::Oracle),
        "series" => Ok(EigenRoute::Series),
        other => Err(py_err(CoreError::Config(format!(
            "unknown route {other:?}; use \"oracle\" or \"series\""
        )))),
    }
}

impl PyModel {
    fn check_step(&self, n: usize) -> PyResult<()> {
        if (1..=self.model.n_steps()).contains(&n) {
            Ok(())
        } else {
            Err(py_err(CoreError::Config(format!(
                "step {n} outside 1..={}",
                self.model.n_steps()
            ))))
        }
    }
}

#[pymethods]
impl PyModel {
    /// `params` takes the same keys as the `[params]` table of a run config.
    #[new]
    #[pyo3(signature = (potential, k, steps = 3, params = None))]
    fn new(
        py: Python<'_>,
        potential: &PyPotential,
        k: f64,
        steps: usize,
        params: Option<&Bound<'_, PyDict>>,
    ) -> PyResult<Self> {
        let params: Params = match params {
            Some(d) => {
                let text: String = py.import("json")?.call_method1("dumps", (d,))?.extract()?;
                serde_json::from_str(&text).map_err(|e| py_err(CoreError::Config(e.to_string())))?
            }
            None => Params::default(),
        };
        Model::new(potential.spec.clone(), params, k, steps)
            .map(|model| Self { model })
            .map_err(py_err)
    }

    #[getter]
    fn k(&self) -> f64 {
        self.model.k
    }

    #[getter]
    fn energy(&self) -> f64 {
        self.model.lambda
    }

    #[getter]
    fn steps(&self) -> usize {
        self.model.n_steps()
    }

    #[getter]
    fn scale_cuts(&self) -> Vec<u32> {
        self.model.cuts.clone()
    }

    fn params<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_value(py, &to_json(&self.model.params)?)
    }

    fn contour_radius(&self, n: usize) -> PyResult<f64> {
        self.check_step(n)?;
        Ok(self.model.contour_radius(n))
    }

    /// Eigenvalue of step `n` continued from the plane wave at momentum `(x, y)`.
    fn tracked_eigenvalue(&self, n: usize, x: f64, y: f64) -> PyResult<f64> {
        self.check_step(n)?;
        self.model
            .tracked_eigenvalue(n, [x, y])
            .map(|t| t.value)
            .map_err(py_err)
    }

    /// Oracle eigenvalues of the step-`n` Bloch matrix on a ball around `(x, y)`, inside `[lo, hi]`.
    fn oracle_eigenvalues(&self, n: usize, x: f64, y: f64, lo: f64, hi: f64) -> PyResult<Vec<f64>> {
        self.check_step(n)?;
        let h = self.model.local_matrix(n, [x, y], Operator::Cumulative);
        oracle_spectrum(&h, Some((lo, hi)), Route::Auto)
            .map(|s| s.eigenvalues)
            .map_err(py_err)
    }

    /// First-step series at direction `phi` and radius `k`: `(value, oracle, tail_bound, [g_r])`.
    fn series(&self, phi: f64) -> PyResult<(f64, Option<f64>, f64, Vec<f64>)> {
        let k = self.model.k;
        let x = [k * phi.cos(), k * phi.sin()];
        let h = self.model.local_matrix(1, x, Operator::Cumulative);
        let j = h
            .position(DualIndex::ZERO)
            .expect("the ball contains its center");
        let contour = Contour::new(h.diag[j].re, self.model.contour_radius(1));
        let s = eigenvalue_series(&h, j, 1.0, self.model.params.r_max, &contour).map_err(py_err)?;
        Ok((
            s.value,
            s.oracle_eigenvalue,
            s.tail_bound,
            s.terms.iter().map(|t| t.0).collect(),
        ))
    }

    /// Non-resonant first-step angles as sorted `(start, end)` intervals.
    fn first_step_angles(&self, py: Python<'_>) -> PyResult<Vec<(f64, f64)>> {
        let set = py
            .detach(|| build_first_cheese(&self.model))
            .map_err(py_err)?;
        Ok(set.theta.intervals)
    }

    /// Radius `kappa_n(phi)` of the step-`n` isoenergetic curve, searched around `center` (default `k`).
    #[pyo3(signature = (n, phi, center = None))]
    fn solve_kappa(&self, n: usize, phi: f64, center: Option<f64>) -> PyResult<f64> {
        self.check_step(n)?;
        let c = center.unwrap_or(self.model.k);
        solve_kappa(&self.model, n, phi, c, window_half_width(&self.model, n))
            .map(|r| r.kappa)
            .map_err(py_err)
    }

    /// Bloch eigenfunction of step `n` at momentum `(x, y)` with the eigenvalue in the contour window.
    #[pyo3(signature = (n, x, y, route = "oracle"))]
    fn eigenfunction(&self, n: usize, x: f64, y: f64, route: &str) -> PyResult<PyEigenfunction> {
        self.check_step(n)?;
        let w = self.model.contour_radius(n);
        let window = (self.model.lambda - w, self.model.lambda + w);
        bloch_eigenfunction(&self.model, n, [x, y], window, parse_route(route)?)
            .map(|inner| PyEigenfunction { inner })
            .map_err(py_err)
    }
}

fn load_config(config: &Path, steps: Option<usize>, seed: Option<u64>) -> PyResult<RunConfig> {
    let mut cfg = RunConfig::from_path(config).map_err(py_err)?;
    if let Some(s) = steps {
        cfg.steps = s;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Runs every stage for each configured energy and returns the manifest.
#[pyfunction]
#[pyo3(signature = (config, out = None, steps = None, seed = None))]
fn run<'py>(
    py: Python<'py>,
    config: PathBuf,
    out: Option<PathBuf>,
    steps: Option<usize>,
    seed: Option<u64>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = load_config(&config, steps, seed)?;
    let out = out.unwrap_or_else(|| cfg.output_dir());
    let manifest = py.detach(|| run_pipeline(&cfg, &out)).map_err(py_err)?;
    json_value(py, &to_json(&manifest)?)
}

/// Trend scan over the configured `scan_k`; returns the manifest with its trend table.
#[pyfunction]
#[pyo3(signature = (config, out = None, seed = None))]
fn scan<'py>(
    py: Python<'py>,
    config: PathBuf,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = load_config(&config, None, seed)?;
    let out = out.unwrap_or_else(|| cfg.output_dir());
    let manifest = py.detach(|| run_scan(&cfg, &out)).map_err(py_err)?;
    json_value(py, &to_json(&manifest)?)
}

#[pymodule]
#[pyo3(name = "spectral_lab")]
pub fn spectral_lab_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("LabError", m.py().get_type::<LabError>())?;
    m.add_class::<PyPotential>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyEigenfunction>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(scan, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
