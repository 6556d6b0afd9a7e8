//! Python bindings: `import ussl`.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use ussl_core::cds;
use ussl_core::config::KvFile;
use ussl_core::doe;
use ussl_core::eval::{self, PipelineConfig};
use ussl_core::synthdata::{self, ScenarioSpec, Split};
use ussl_core::training;

fn py_err(e: ussl_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn apply(kv: &mut KvFile, overrides: &[String]) -> PyResult<()> {
    for o in overrides {
        kv.apply_override(o).map_err(py_err)?;
    }
    Ok(())
}

fn parse_split(name: &str) -> PyResult<Split> {
    Split::parse(name).ok_or_else(|| PyValueError::new_err(format!("unknown split `{name}`")))
}

/// Area under the ROC curve; ties count one half.
#[pyfunction]
fn auc_roc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    eval::auc_roc(&scores, &labels).map_err(py_err)
}

#[pyfunction]
fn accuracy(predictions: Vec<usize>, labels: Vec<usize>) -> PyResult<f64> {
    eval::accuracy(&predictions, &labels).map_err(py_err)
}

#[pyfunction]
fn rampup(epoch: usize, warmup: usize) -> f64 {
    training::rampup(epoch, warmup)
}

/// Min-max normalization of a pool of raw outlier scores.
#[pyfunction]
fn normalize_pool(z: Vec<f64>) -> PyResult<Vec<f64>> {
    doe::normalize_pool(&z).map_err(py_err)
}

#[pyclass(name = "GmmFit", frozen)]
struct PyGmmFit(cds::GmmFit);

#[pymethods]
impl PyGmmFit {
    #[getter]
    fn weights(&self) -> [f64; 2] {
        self.0.weights
    }
    #[getter]
    fn means(&self) -> [f64; 2] {
        self.0.means
    }
    #[getter]
    fn variances(&self) -> [f64; 2] {
        self.0.variances
    }
    #[getter]
    fn log_likelihood(&self) -> Vec<f64> {
        self.0.log_likelihood.clone()
    }
    #[getter]
    fn ukd_component(&self) -> usize {
        self.0.ukd_component
    }
    #[getter]
    fn converged(&self) -> bool {
        self.0.converged
    }
    /// Posterior of the high-error component at `x`.
    fn posterior(&self, x: f64) -> f64 {
        cds::posterior_ukd(&self.0, x)
    }
    fn __repr__(&self) -> String {
        format!(
            "GmmFit(weights={:?}, means={:?}, variances={:?})",
            self.0.weights, self.0.means, self.0.variances
        )
    }
}

#[pyfunction]
#[pyo3(signature = (errors, max_iters = 500, tol = 1e-8))]
fn fit_gmm2(errors: Vec<f64>, max_iters: usize, tol: f64) -> PyResult<PyGmmFit> {
    cds::fit_gmm2(&errors, max_iters, tol).map(PyGmmFit).map_err(py_err)
}

#[pyclass(name = "Scenario", frozen)]
struct PyScenario(synthdata::Scenario);

#[pymethods]
impl PyScenario {
    #[getter]
    fn input_dim(&self) -> usize {
        self.0.input_dim
    }
    #[getter]
    fn known_classes(&self) -> usize {
        self.0.known_classes
    }
    /// Rows of one split: "labeled", "unlabeled", "val" or "test".
    fn inputs(&self, split: &str) -> PyResult<Vec<Vec<f64>>> {
        Ok(self.0.split(parse_split(split)?).iter().map(|s| s.x.clone()).collect())
    }
    fn labels(&self, split: &str) -> PyResult<Vec<usize>> {
        Ok(self.0.labels(parse_split(split)?))
    }
    fn ukc_flags(&self) -> Vec<bool> {
        self.0.ukc_flags()
    }
    fn ukd_flags(&self) -> Vec<bool> {
        self.0.ukd_flags()
    }
    fn to_csv(&self) -> String {
        self.0.to_csv()
    }
    #[staticmethod]
    fn from_csv(text: &str) -> PyResult<Self> {
        synthdata::Scenario::from_csv(text).map(PyScenario).map_err(py_err)
    }
    fn __len__(&self) -> usize {
        Split::ALL.iter().map(|&s| self.0.split(s).len()).sum()
    }
}

fn resolve_spec(seed: u64, spec: &[String]) -> PyResult<ScenarioSpec> {
    let mut kv = ScenarioSpec::default_universal(seed).to_kv();
    apply(&mut kv, spec)?;
    Ok(ScenarioSpec::from_kv(&kv).map_err(py_err)?.with_seed(seed))
}

/// Generates the default universal scenario, with optional `key=value`
/// overrides of its description.
#[pyfunction]
#[pyo3(signature = (seed, spec = Vec::new()))]
fn generate_scenario(seed: u64, spec: Vec<String>) -> PyResult<PyScenario> {
    resolve_spec(seed, &spec)?.generate().map(PyScenario).map_err(py_err)
}

#[pyclass(name = "MetricReport", frozen)]
struct PyMetricReport(eval::MetricReport);

#[pymethods]
impl PyMetricReport {
    fn to_json(&self) -> String {
        self.0.to_json()
    }
    fn body_json(&self) -> String {
        self.0.body_json()
    }
    fn to_text(&self) -> String {
        self.0.to_text()
    }
    /// Mean of an aggregated metric, or None when it was not computed.
    fn mean(&self, metric: &str) -> Option<f64> {
        self.0.mean(metric)
    }
    #[getter]
    fn runtime_seconds(&self) -> f64 {
        self.0.runtime_seconds
    }
    #[getter]
    fn num_seeds(&self) -> usize {
        self.0.body.seeds.len()
    }
}

/// Runs the full pipeline on the universal scenario for each seed.
/// `config` and `spec` are lists of `key=value` overrides.
#[pyfunction]
#[pyo3(signature = (seeds, config = Vec::new(), spec = Vec::new()))]
fn run_experiment(py: Python<'_>, seeds: Vec<u64>, config: Vec<String>, spec: Vec<String>) -> PyResult<PyMetricReport> {
    let spec = resolve_spec(seeds.first().copied().unwrap_or(0), &spec)?;
    let mut kv = KvFile::new();
    apply(&mut kv, &config)?;
    let cfg = PipelineConfig::from_kv(&kv, spec.input_dim()).map_err(py_err)?;
    py.detach(|| eval::run_experiment(&spec, &cfg, &seeds))
        .map(PyMetricReport)
        .map_err(py_err)
}

#[pymodule]
fn ussl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(auc_roc, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(rampup, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_pool, m)?)?;
    m.add_function(wrap_pyfunction!(fit_gmm2, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_class::<PyGmmFit>()?;
    m.add_class::<PyScenario>()?;
    m.add_class::<PyMetricReport>()?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
