//! Python bindings. Results with nested structure come back as plain dicts.

use std::path::PathBuf;

use gsens::cli::config::ResolvedColumns;
use gsens::cli::spec_for;
use gsens::sensitivity::default_alpha_grid;
use gsens::simulation::{calibrate_linear, calibrate_logistic, run_monte_carlo, FixedCoefficients};
use gsens::{DgpConfig, Link, SmmSpec};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use pyo3::IntoPyObjectExt;
use serde::Serialize;

create_exception!(gsens, GsensError, PyException);

fn to_py_err(e: gsens::Error) -> PyErr {
    GsensError::new_err(e.to_string())
}

fn json_to_py<'py>(py: Python<'py>, value: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    use serde_json::Value;
    match value {
        Value::Null => Ok(py.None().into_bound(py)),
        Value::Bool(b) => b.into_bound_py_any(py),
        Value::Number(n) => match (n.as_i64(), n.as_u64()) {
            (Some(i), _) => i.into_bound_py_any(py),
            (None, Some(u)) => u.into_bound_py_any(py),
            _ => n.as_f64().unwrap_or(f64::NAN).into_bound_py_any(py),
        },
        Value::String(s) => s.into_bound_py_any(py),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            Ok(list.into_any())
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, v) in map {
                dict.set_item(k, json_to_py(py, v)?)?;
            }
            Ok(dict.into_any())
        }
    }
}

fn to_dict<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| GsensError::new_err(e.to_string()))?;
    json_to_py(py, &v)
}

fn parse_link(link: &str) -> PyResult<Link> {
    link.parse().map_err(to_py_err)
}

/// Observations of outcome `y`, exposure `x`, instrument `z` and optional covariates.
#[pyclass(name = "Dataset", module = "gsens", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: gsens::Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    #[pyo3(signature = (y, x, z, covariates=None, names=None))]
    fn new(
        y: Vec<f64>,
        x: Vec<f64>,
        z: Vec<f64>,
        covariates: Option<Vec<Vec<f64>>>,
        names: Option<Vec<String>>,
    ) -> PyResult<Self> {
        let covariates = covariates.unwrap_or_default();
        let names =
            names.unwrap_or_else(|| (0..covariates.len()).map(|j| format!("l{j}")).collect());
        gsens::Dataset::with_covariates(y, x, z, covariates, names)
            .map(|inner| PyDataset { inner })
            .map_err(to_py_err)
    }

    /// Reads a CSV file; rows with missing values in the selected columns are dropped.
    #[staticmethod]
    #[pyo3(signature = (path, y, x, z, covariates=Vec::new()))]
    fn from_csv(
        path: PathBuf,
        y: Option<String>,
        x: String,
        z: String,
        covariates: Vec<String>,
    ) -> PyResult<Self> {
        let columns = ResolvedColumns {
            y,
            x,
            z,
            covariates,
        };
        gsens::cli::load_csv(&path, &columns)
            .map(|inner| PyDataset { inner })
            .map_err(to_py_err)
    }

    fn to_csv(&self, path: PathBuf) -> PyResult<()> {
        gsens::cli::write_dataset_csv(&self.inner, &path).map_err(to_py_err)
    }

    /// Divides the exposure by its sample standard deviation and returns that divisor.
    fn standardize_exposure(&mut self) -> PyResult<f64> {
        self.inner.standardize_exposure().map_err(to_py_err)
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn y(&self) -> Vec<f64> {
        self.inner.y().to_vec()
    }

    #[getter]
    fn x(&self) -> Vec<f64> {
        self.inner.x().to_vec()
    }

    #[getter]
    fn z(&self) -> Vec<f64> {
        self.inner.z().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.n()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n={}, covariates={})",
            self.inner.n(),
            self.inner.n_covariates()
        )
    }
}

/// G-estimate of ψ at one α.
#[pyclass(name = "GEstimate", module = "gsens", frozen)]
struct PyGEstimate {
    #[pyo3(get)]
    alpha: f64,
    #[pyo3(get)]
    psi: Option<f64>,
    #[pyo3(get)]
    se: Option<f64>,
    #[pyo3(get)]
    ci: Option<(f64, f64)>,
    #[pyo3(get)]
    status: &'static str,
    #[pyo3(get)]
    n_roots: usize,
    #[pyo3(get)]
    theta: Vec<f64>,
}

impl From<&gsens::GEstimate> for PyGEstimate {
    fn from(g: &gsens::GEstimate) -> Self {
        PyGEstimate {
            alpha: g.alpha,
            psi: g.psi,
            se: g.psi_variance().map(f64::sqrt),
            ci: g.ci,
            status: g.status.as_str(),
            n_roots: g.diagnostics.n_roots,
            theta: g.theta.clone(),
        }
    }
}

#[pymethods]
impl PyGEstimate {
    #[getter]
    fn solved(&self) -> bool {
        self.status == "solved"
    }

    fn __repr__(&self) -> String {
        let psi = self.psi.map_or("None".to_string(), |p| p.to_string());
        let ci = self
            .ci
            .map_or("None".to_string(), |(lo, hi)| format!("({lo}, {hi})"));
        format!(
            "GEstimate(alpha={}, psi={psi}, ci={ci}, status='{}')",
            self.alpha, self.status
        )
    }
}

fn spec(link: &str, data: &PyDataset) -> PyResult<SmmSpec> {
    Ok(spec_for(parse_link(link)?, &data.inner))
}

#[pyfunction]
#[pyo3(signature = (data, alpha, link="logit"))]
fn fit(data: &PyDataset, alpha: f64, link: &str) -> PyResult<PyGEstimate> {
    let spec = spec(link, data)?;
    gsens::fit_g_estimator(&data.inner, &spec, alpha)
        .map(|g| PyGEstimate::from(&g))
        .map_err(to_py_err)
}

/// Fits ψ over a grid of α; defaults to 21 points at step 0.02 around 0.
#[pyfunction]
#[pyo3(signature = (data, grid=None, link="logit"))]
fn sweep(
    py: Python<'_>,
    data: &PyDataset,
    grid: Option<Vec<f64>>,
    link: &str,
) -> PyResult<Vec<PyGEstimate>> {
    let spec = spec(link, data)?;
    let grid = grid.unwrap_or_else(|| default_alpha_grid(0.0));
    let result = py
        .detach(|| gsens::sweep_alpha(&data.inner, &spec, &grid))
        .map_err(to_py_err)?;
    Ok(result.entries.iter().map(PyGEstimate::from).collect())
}

#[pyfunction]
fn closed_form_linear(data: &PyDataset, alpha: f64) -> PyResult<f64> {
    gsens::closed_form_linear(&data.inner, alpha).map_err(to_py_err)
}

/// First-stage F test of X on Z.
#[pyfunction]
fn relevance<'py>(py: Python<'py>, data: &PyDataset) -> PyResult<Bound<'py, PyAny>> {
    let check = gsens::relevance_check(&data.inner).map_err(to_py_err)?;
    to_dict(py, &check)
}

fn calibrated(
    link: &str,
    psi: f64,
    alpha_star: f64,
    p_z: f64,
    p_x: f64,
    p_y: Option<f64>,
    sigma: f64,
) -> PyResult<DgpConfig> {
    let fixed = FixedCoefficients::default();
    match parse_link(link)? {
        Link::Identity => calibrate_linear(psi, alpha_star, p_z, p_x, &fixed, sigma)
            .map(DgpConfig::Linear)
            .map_err(to_py_err),
        Link::Logit => {
            let p_y =
                p_y.ok_or_else(|| GsensError::new_err("p_y is required for the logit link"))?;
            calibrate_logistic(psi, alpha_star, p_z, p_x, p_y, &fixed)
                .map(DgpConfig::Logistic)
                .map_err(to_py_err)
        }
        Link::Log => Err(GsensError::new_err("the log link has no simulation design")),
    }
}

/// Solves for the data-generating coefficients matching the targets.
#[pyfunction]
#[pyo3(signature = (link, psi, alpha_star, p_z, p_x, p_y=None, sigma=1.0))]
fn calibrate<'py>(
    py: Python<'py>,
    link: &str,
    psi: f64,
    alpha_star: f64,
    p_z: f64,
    p_x: f64,
    p_y: Option<f64>,
    sigma: f64,
) -> PyResult<Bound<'py, PyAny>> {
    to_dict(
        py,
        &calibrated(link, psi, alpha_star, p_z, p_x, p_y, sigma)?,
    )
}

/// Draws one dataset from the calibrated design.
#[pyfunction]
#[pyo3(signature = (link, psi, alpha_star, p_z, p_x, n, seed, p_y=None, sigma=1.0))]
#[allow(clippy::too_many_arguments)]
fn generate(
    link: &str,
    psi: f64,
    alpha_star: f64,
    p_z: f64,
    p_x: f64,
    n: usize,
    seed: u64,
    p_y: Option<f64>,
    sigma: f64,
) -> PyResult<PyDataset> {
    let config = calibrated(link, psi, alpha_star, p_z, p_x, p_y, sigma)?;
    config
        .generate(n, seed)
        .map(|inner| PyDataset { inner })
        .map_err(to_py_err)
}

/// Monte Carlo coverage study over a grid of α (default α* ± 0.2, step 0.02).
#[pyfunction]
#[pyo3(signature = (link, psi, alpha_star, p_z, p_x, n, m, seed, p_y=None, sigma=1.0, grid=None))]
#[allow(clippy::too_many_arguments)]
fn simulate<'py>(
    py: Python<'py>,
    link: &str,
    psi: f64,
    alpha_star: f64,
    p_z: f64,
    p_x: f64,
    n: usize,
    m: usize,
    seed: u64,
    p_y: Option<f64>,
    sigma: f64,
    grid: Option<Vec<f64>>,
) -> PyResult<Bound<'py, PyAny>> {
    let config = calibrated(link, psi, alpha_star, p_z, p_x, p_y, sigma)?;
    let spec = SmmSpec::new(config.link());
    let grid = grid.unwrap_or_else(|| default_alpha_grid(alpha_star));
    let report = py
        .detach(|| run_monte_carlo(&config, &spec, n, m, &grid, seed))
        .map_err(to_py_err)?;
    to_dict(py, &report)
}

#[pymodule]
#[pyo3(name = "gsens")]
fn gsens_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("GsensError", m.py().get_type::<GsensError>())?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyGEstimate>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(closed_form_linear, m)?)?;
    m.add_function(wrap_pyfunction!(relevance, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
