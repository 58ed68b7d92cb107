//! Python bindings: load and simulate profile sets, fit and select additive
//! temperature models, evaluate risk statistics and run the transport solver.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use profiles::cli::{load_model, parse_spec};
use profiles::dataset::{self, Covariate, EDGE_THRESHOLD, REFLECTION_THRESHOLD};
use profiles::design::FitScale;
use profiles::diffusivity::{self, DischargeConditions};
use profiles::error::Error;
use profiles::model::{self, FitOptions, LambdaMode};
use profiles::risk::RiskReport;
use profiles::selection::{self, Criterion, SelectionOptions};
use profiles::spline;
use profiles::synthetic::{self, SimulationConfig};

fn py_err(e: Error) -> PyErr {
    match e.exit_code() {
        1 => PyOSError::new_err(e.to_string()),
        2 => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn risk_dict(r: &RiskReport) -> BTreeMap<String, Option<f64>> {
    BTreeMap::from([
        ("ease_cw".into(), Some(r.ease_cw)),
        ("gcv".into(), r.gcv),
        ("rice".into(), r.rice),
        ("chi2".into(), r.chi2),
        ("sigma2_cw".into(), r.sigma2_cw),
        ("dof_effective".into(), Some(r.dof_effective)),
        ("rss_weighted".into(), Some(r.rss_weighted)),
        ("trace_kg".into(), Some(r.trace_kg)),
        ("trace_cg".into(), Some(r.trace_cg)),
    ])
}

/// A validated collection of temperature profiles.
#[pyclass(name = "ProfileSet", frozen)]
struct PyProfileSet {
    inner: dataset::ProfileSet,
}

#[pymethods]
impl PyProfileSet {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn ids(&self) -> Vec<String> {
        self.inner.records.iter().map(|r| r.id.clone()).collect()
    }

    #[getter]
    fn measured_points(&self) -> usize {
        self.inner.measured_points()
    }

    /// Edge cleaning and optional inboard reflection.
    #[pyo3(signature = (edge_threshold = EDGE_THRESHOLD, reflection_threshold = Some(REFLECTION_THRESHOLD)))]
    fn preprocess(&self, edge_threshold: f64, reflection_threshold: Option<f64>) -> PyResult<Self> {
        let inner = self.inner.preprocess(edge_threshold, reflection_threshold).map_err(py_err)?;
        Ok(Self { inner })
    }

    /// `(psi, temp, sigma, covariates)` of one record.
    fn record(&self, i: usize) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>, BTreeMap<String, f64>)> {
        let r = self
            .inner
            .records
            .get(i)
            .ok_or_else(|| PyValueError::new_err(format!("record index {i} out of range")))?;
        Ok((r.psi.clone(), r.temp.clone(), r.sigma.clone(), r.covariates.clone()))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.write_ndjson(path).map_err(py_err)
    }
}

/// Cubic B-spline basis.
#[pyclass(name = "SplineBasis", frozen)]
struct PySplineBasis {
    inner: spline::SplineBasis,
}

#[pymethods]
impl PySplineBasis {
    /// Radial basis on `[-1, 1]`; `edge_thinning = 1` gives uniform knots.
    #[new]
    #[pyo3(signature = (n_interior = 20, edge_thinning = 1.0))]
    fn new(n_interior: usize, edge_thinning: f64) -> PyResult<Self> {
        let inner = spline::SplineBasis::radial(n_interior, edge_thinning).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn knots(&self) -> Vec<f64> {
        self.inner.knots().to_vec()
    }

    fn eval(&self, x: f64) -> PyResult<Vec<f64>> {
        self.inner.eval(x).map_err(py_err)
    }

    #[pyo3(signature = (x, n = 1))]
    fn derivative(&self, x: f64, n: usize) -> PyResult<Vec<f64>> {
        self.inner.eval_derivative(x, n).map_err(py_err)
    }

    /// Third-derivative roughness penalty, row by row.
    fn penalty(&self) -> Vec<Vec<f64>> {
        let s = self.inner.penalty_matrix();
        s.row_iter().map(|r| r.iter().copied().collect()).collect()
    }
}

/// A fitted additive model `ln T = sum f_l(psi) h_l(u)`.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: model::FittedModel,
}

#[pymethods]
impl PyModel {
    /// A file path or `builtin:table3` / `builtin:table4`.
    #[staticmethod]
    fn load(source: &str) -> PyResult<Self> {
        Ok(Self {
            inner: load_model(source).map_err(py_err)?,
        })
    }

    #[getter]
    fn terms(&self) -> Vec<String> {
        self.inner.terms.iter().map(|t| t.name()).collect()
    }

    #[getter]
    fn lambdas(&self) -> Vec<f64> {
        self.inner.terms.iter().map(|t| t.lambda).collect()
    }

    #[getter]
    fn metrics(&self) -> Option<BTreeMap<String, f64>> {
        self.inner.metrics.map(|m| {
            BTreeMap::from([
                ("mae_ev".into(), m.mae),
                ("mae_percent".into(), m.mae_percent),
                ("log_rmse".into(), m.log_rmse),
                ("mean_line_average_ev".into(), m.mean_line_average),
            ])
        })
    }

    #[getter]
    fn risk(&self) -> Option<BTreeMap<String, Option<f64>>> {
        self.inner.risk.as_ref().map(risk_dict)
    }

    fn term_value(&self, term: usize, psi: f64) -> PyResult<f64> {
        self.inner.term_value(term, psi).map_err(py_err)
    }

    /// Temperature at `psi` for raw covariate values, in the units of the fitted data.
    fn predict(&self, psi: f64, covariates: BTreeMap<String, f64>) -> PyResult<f64> {
        self.inner.predict(psi, &covariates).map_err(py_err)
    }

    #[pyo3(signature = (step = 0.1))]
    fn tabulate(&self, step: f64) -> PyResult<String> {
        self.inner.tabulate(step).map_err(py_err)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }
}

/// Discharge inputs for the transport solver.
#[pyclass(name = "Conditions", frozen)]
struct PyConditions {
    inner: DischargeConditions,
}

#[pymethods]
impl PyConditions {
    #[new]
    #[pyo3(signature = (id, rho, density, source, edge_temp, minor_radius, covariates = BTreeMap::new()))]
    fn new(
        id: String,
        rho: Vec<f64>,
        density: Vec<f64>,
        source: Vec<f64>,
        edge_temp: f64,
        minor_radius: f64,
        covariates: BTreeMap<String, f64>,
    ) -> PyResult<Self> {
        let inner = DischargeConditions {
            id,
            psi_grid: rho,
            density,
            source,
            edge_temp,
            minor_radius,
            covariates,
        };
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Parabolic density and Gaussian heating on `n_points` radii.
    #[staticmethod]
    #[pyo3(signature = (id, n_points = 41, central_density = 3.0, peak_source = 2e5, source_width = 0.4, edge_temp = 90.0, minor_radius = 1.0))]
    fn synthetic(
        id: &str,
        n_points: usize,
        central_density: f64,
        peak_source: f64,
        source_width: f64,
        edge_temp: f64,
        minor_radius: f64,
    ) -> Self {
        let inner = diffusivity::synthetic_conditions(id, n_points, central_density, peak_source, source_width, edge_temp, minor_radius);
        Self { inner }
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }
}

#[pyfunction]
#[pyo3(signature = (path, raw = false))]
fn load_profiles(path: &str, raw: bool) -> PyResult<PyProfileSet> {
    let set = dataset::load_profiles(path).map_err(py_err)?;
    let inner = if raw {
        set
    } else {
        set.preprocess(EDGE_THRESHOLD, Some(REFLECTION_THRESHOLD)).map_err(py_err)?
    };
    Ok(PyProfileSet { inner })
}

/// Fit `spec` (a preset name, inline JSON or a file). Without `lambdas` the
/// smoothing parameters minimize `criterion`.
#[pyfunction]
#[pyo3(signature = (profiles, spec = "full", lambdas = None, criterion = "rice", linear = false))]
fn fit(profiles: &PyProfileSet, spec: &str, lambdas: Option<Vec<f64>>, criterion: &str, linear: bool) -> PyResult<PyModel> {
    let spec = parse_spec(spec, false).map_err(py_err)?;
    let criterion: Criterion = criterion.parse().map_err(py_err)?;
    let lambda = match lambdas {
        Some(l) => LambdaMode::Fixed(l),
        None => LambdaMode::Optimize {
            criterion,
            grid: Default::default(),
        },
    };
    let options = FitOptions {
        scale: if linear { FitScale::Linear } else { FitScale::Log },
        lambda,
        ..Default::default()
    };
    let inner = model::fit_model(&profiles.inner, &spec, &options).map_err(py_err)?;
    Ok(PyModel { inner })
}

/// Greedy covariate selection; returns the trace as JSON.
#[pyfunction]
#[pyo3(signature = (profiles, candidates, max_stages = 5, tolerance = None))]
fn forward_select(profiles: &PyProfileSet, candidates: Vec<String>, max_stages: usize, tolerance: Option<f64>) -> PyResult<String> {
    let candidates = candidates
        .iter()
        .map(|c| c.parse::<Covariate>())
        .collect::<profiles::error::Result<Vec<_>>>()
        .map_err(py_err)?;
    let mut options = SelectionOptions::default();
    if let Some(t) = tolerance {
        options.tolerance = t;
    }
    let trace = selection::forward_select(&profiles.inner, &candidates, max_stages, &options).map_err(py_err)?;
    Ok(trace.to_json())
}

#[pyfunction]
#[pyo3(signature = (model, n_profiles = 43, points = 50, noise = 0.10, seed = 0))]
fn simulate(model: &PyModel, n_profiles: usize, points: usize, noise: f64, seed: u64) -> PyResult<PyProfileSet> {
    let config = SimulationConfig {
        n_profiles,
        points_per_profile: points,
        noise_rel: noise,
        seed,
        ..Default::default()
    };
    let records = synthetic::simulate_profiles(&model.inner, &config).map_err(py_err)?;
    let inner = dataset::ProfileSet::new(records)
        .map_err(py_err)?
        .with_normalization(model.inner.normalization.clone());
    Ok(PyProfileSet { inner })
}

/// Every risk statistic from a weighted residual sum of squares and the traces
/// `tr(KG)` and `tr(CG)` over `n` measured points.
#[pyfunction]
fn risk(rss: f64, trace_kg: f64, trace_cg: f64, n: usize) -> BTreeMap<String, Option<f64>> {
    risk_dict(&RiskReport::from_parts(rss, trace_kg, trace_cg, n))
}

/// Steady-state temperature `(rho, T)` for a diffusivity model.
#[pyfunction]
#[pyo3(signature = (chi, conditions, n_grid = 201))]
fn forward_temperature(chi: &PyModel, conditions: &PyConditions, n_grid: usize) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let p = diffusivity::forward_temperature(&chi.inner, &conditions.inner, n_grid).map_err(py_err)?;
    Ok((p.rho, p.temp))
}

/// Diffusivity model with coefficients interpolating `ln chi` at `rho`.
#[pyfunction]
#[pyo3(signature = (rho, log_chi, n_interior = 9))]
fn chi_model(rho: Vec<f64>, log_chi: Vec<f64>, n_interior: usize) -> PyResult<PyModel> {
    let basis = diffusivity::chi_basis(n_interior).map_err(py_err)?;
    let coeffs = synthetic::interpolate(&basis, &rho, &log_chi).map_err(py_err)?;
    let term = profiles::design::TermSpec::intercept();
    let inner = model::FittedModel::from_coefficients(basis, vec![(term, coeffs)], BTreeMap::new()).map_err(py_err)?;
    Ok(PyModel { inner })
}

#[pymodule]
fn plasma_profiles(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyProfileSet>()?;
    m.add_class::<PySplineBasis>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyConditions>()?;
    m.add_function(wrap_pyfunction!(load_profiles, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(forward_select, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(risk, m)?)?;
    m.add_function(wrap_pyfunction!(forward_temperature, m)?)?;
    m.add_function(wrap_pyfunction!(chi_model, m)?)?;
    Ok(())
}
