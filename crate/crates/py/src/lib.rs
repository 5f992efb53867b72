//! Python bindings for the sparsekit toolkit.
//!
//! Exposes the main types and operations — configs, training runs, pruning
//! schedules and allocation, hard-concrete gates, the variational-dropout KL
//! approximation, checkpoints, FLOP counting, Pareto frontiers, and the
//! gradient-check battery — as a `sparsekit_py` extension module.
//!
//! Build with `cargo build --release -p sparsekit-py`; the resulting
//! `libsparsekit_py.so` imports as `sparsekit_py` once renamed (see
//! `python/smoke_test.py`, which stages it automatically).

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyIOError, PyKeyError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use sparsekit::checkpoint;
use sparsekit::config;
use sparsekit::error::Error;
use sparsekit::gradcheck;
use sparsekit::l0::HardConcreteParams;
use sparsekit::models::ModelSpec;
use sparsekit::report;
use sparsekit::rng::RngState;
use sparsekit::runner;
use sparsekit::schedule;
use sparsekit::tensor::Tensor;
use sparsekit::vd;

fn perr(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Piecewise-cubic magnitude-pruning schedule.
#[pyclass(name = "PruningSchedule")]
struct PyPruningSchedule {
    inner: schedule::PruningSchedule,
}

#[pymethods]
impl PyPruningSchedule {
    #[new]
    fn new(
        start_step: u64,
        end_step: u64,
        frequency: u64,
        initial_sparsity: f64,
        final_sparsity: f64,
    ) -> PyResult<Self> {
        schedule::PruningSchedule::new(
            start_step,
            end_step,
            frequency,
            initial_sparsity,
            final_sparsity,
        )
        .map(|inner| Self { inner })
        .map_err(perr)
    }

    /// Target sparsity in effect at `step`.
    fn sparsity_at(&self, step: u64) -> f64 {
        self.inner.sparsity_at(step)
    }

    /// True when `step` is a mask-update event.
    fn is_event(&self, step: u64) -> bool {
        self.inner.is_event(step)
    }

    /// All mask-update steps, in order.
    fn events(&self) -> Vec<u64> {
        self.inner.events()
    }

    fn __repr__(&self) -> String {
        format!(
            "PruningSchedule(start={}, end={}, freq={}, s0={}, sf={})",
            self.inner.start_step,
            self.inner.end_step,
            self.inner.frequency,
            self.inner.initial_sparsity,
            self.inner.final_sparsity,
        )
    }
}

/// Hard-concrete gate distribution over a flat vector of weights.
#[pyclass(name = "HardConcrete")]
struct PyHardConcrete {
    inner: HardConcreteParams<f64>,
}

#[pymethods]
impl PyHardConcrete {
    #[new]
    #[pyo3(signature = (log_alpha, beta = 2.0 / 3.0, gamma = -0.1, zeta = 1.1))]
    fn new(log_alpha: Vec<f64>, beta: f64, gamma: f64, zeta: f64) -> PyResult<Self> {
        let n = log_alpha.len();
        let t = Tensor::new(vec![n], log_alpha).map_err(perr)?;
        HardConcreteParams::new(t, beta, gamma, zeta)
            .map(|inner| Self { inner })
            .map_err(perr)
    }

    /// Gates initialized so the expected test gate equals `1 - rate`.
    #[staticmethod]
    #[pyo3(signature = (count, rate, beta = 2.0 / 3.0, gamma = -0.1, zeta = 1.1))]
    fn from_dropout_rate(count: usize, rate: f64, beta: f64, gamma: f64, zeta: f64) -> PyResult<Self> {
        HardConcreteParams::from_dropout_rate(&[count], rate, beta, gamma, zeta)
            .map(|inner| Self { inner })
            .map_err(perr)
    }

    /// Mean of the expected-L0 penalty over all gates.
    fn expected_l0(&self) -> f64 {
        self.inner.expected_l0_value()
    }

    /// Probability that the stretched-and-clipped gate is exactly zero.
    fn prob_zero(&self, log_alpha: f64) -> f64 {
        self.inner.prob_zero(log_alpha)
    }

    /// Probability that the gate saturates at exactly one.
    fn prob_one(&self, log_alpha: f64) -> f64 {
        self.inner.prob_one(log_alpha)
    }

    /// Deterministic test-time gate values, one per weight.
    fn test_gates(&self) -> Vec<f64> {
        self.inner.test_gates().data().to_vec()
    }

    /// One stochastic gate draw per weight.
    fn sample(&self, seed: u64) -> Vec<f64> {
        let mut rng = RngState::new(seed);
        self.inner
            .log_alpha
            .data()
            .iter()
            .map(|&la| self.inner.sample_value(la, &mut rng))
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.log_alpha.data().len()
    }
}

/// A resolved run configuration (flat `key = value` schema).
#[pyclass(name = "Config", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: config::Config,
}

impl PyConfig {
    fn pairs(&self) -> Vec<(String, String)> {
        self.inner
            .to_text()
            .lines()
            .filter_map(|line| {
                let (k, v) = line.split_once('=')?;
                Some((k.trim().to_string(), v.trim().to_string()))
            })
            .collect()
    }
}

#[pymethods]
impl PyConfig {
    /// Defaults, optionally overlaid with `key = value` lines.
    #[new]
    #[pyo3(signature = (text = None))]
    fn new(text: Option<&str>) -> PyResult<Self> {
        let inner = match text {
            Some(t) => config::Config::parse(t).map_err(perr)?,
            None => config::Config::parse("").map_err(perr)?,
        };
        Ok(Self { inner })
    }

    /// Load a config file, overlaying the defaults.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        config::Config::load(&path).map(|inner| Self { inner }).map_err(perr)
    }

    /// The full schema with defaults and doc comments.
    #[staticmethod]
    fn defaults() -> String {
        config::Config::documented_defaults()
    }

    /// Set one key (comma lists allowed only on sweepable keys).
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map(|_| ()).map_err(perr)
    }

    /// Current value of a key, as text.
    fn get(&self, key: &str) -> PyResult<String> {
        self.pairs()
            .into_iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v)
            .ok_or_else(|| PyKeyError::new_err(format!("unknown config key `{key}`")))
    }

    /// All keys and values as a dict of strings.
    fn as_dict(&self) -> HashMap<String, String> {
        self.pairs().into_iter().collect()
    }

    /// Stable fingerprint of the resolved config, as 16 hex digits.
    fn hash_hex(&self) -> String {
        format!("{:016x}", self.inner.hash())
    }

    /// Cartesian expansion of comma-listed sweep keys.
    fn expand(&self) -> Vec<PyConfig> {
        self.inner.expand().into_iter().map(|inner| PyConfig { inner }).collect()
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn __repr__(&self) -> String {
        format!("Config(hash={})", self.hash_hex())
    }
}

/// A saved model state: tensors plus optional masks per layer.
#[pyclass(name = "Checkpoint")]
struct PyCheckpoint {
    inner: checkpoint::Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        checkpoint::Checkpoint::load(&path).map(|inner| Self { inner }).map_err(perr)
    }

    /// Record names in file order.
    fn names(&self) -> Vec<String> {
        self.inner.records().iter().map(|(name, _)| name.clone()).collect()
    }

    /// Shape and flat data of a named tensor.
    fn tensor(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f32>)> {
        self.inner
            .tensor(name)
            .map(|t| (t.dims().to_vec(), t.data().to_vec()))
            .ok_or_else(|| PyKeyError::new_err(format!("no tensor record named `{name}`")))
    }

    /// Keep/prune flags of a named mask.
    fn mask(&self, name: &str) -> PyResult<Vec<bool>> {
        let mask = self
            .inner
            .mask(name)
            .ok_or_else(|| PyKeyError::new_err(format!("no mask record named `{name}`")))?;
        Ok((0..mask.len()).map(|i| mask.is_kept(i)).collect())
    }

    /// Per-layer sparsity table as CSV text.
    #[pyo3(signature = (vd_threshold = 3.0))]
    fn distribution_csv(&self, vd_threshold: f64) -> String {
        report::distribution_csv(&self.inner, vd_threshold)
    }

    /// Per-layer evaluation FLOPs for a named architecture, as CSV text.
    #[pyo3(signature = (model, vd_threshold = 3.0))]
    fn flops_csv(&self, model: &str, vd_threshold: f64) -> PyResult<String> {
        let spec = ModelSpec::by_name(model).map_err(perr)?;
        report::checkpoint_flops(&self.inner, &spec, vd_threshold).map_err(perr)
    }
}

/// KL divergence per weight under the log-uniform sparse-dropout prior.
#[pyfunction]
fn kl_per_weight(log_alpha: f64) -> f64 {
    vd::kl_per_weight(log_alpha)
}

/// Split a global sparsity target into per-layer fractions.
///
/// `overrides` pins layers to fixed fractions; the rest share one uniform
/// fraction chosen so the global weight budget is conserved.
#[pyfunction]
#[pyo3(signature = (global_target, layer_sizes, overrides = vec![]))]
fn allocate_layer_targets(
    global_target: f64,
    layer_sizes: Vec<usize>,
    overrides: Vec<(usize, f64)>,
) -> PyResult<Vec<f64>> {
    schedule::allocate_layer_targets(global_target, &layer_sizes, &overrides).map_err(perr)
}

/// Per-layer parameter shapes of a named architecture.
#[pyfunction]
fn weight_info(model: &str) -> PyResult<Vec<(String, Vec<usize>)>> {
    let spec = ModelSpec::by_name(model).map_err(perr)?;
    Ok(spec
        .weight_info()
        .map_err(perr)?
        .into_iter()
        .map(|w| (w.name, w.dims))
        .collect())
}

/// Total evaluation FLOPs (multiply-accumulate = 2 FLOPs) for a named
/// architecture given effective (unpruned) weight counts per layer.
#[pyfunction]
fn count_flops(model: &str, effective: Vec<f64>) -> PyResult<f64> {
    let spec = ModelSpec::by_name(model).map_err(perr)?;
    report::count_flops(&spec, &effective).map_err(perr)
}

/// Dense evaluation FLOPs for a named architecture.
#[pyfunction]
fn dense_flops(model: &str) -> PyResult<f64> {
    let spec = ModelSpec::by_name(model).map_err(perr)?;
    let effective: Vec<f64> = spec
        .weight_info()
        .map_err(perr)?
        .iter()
        .map(|w| w.dims.iter().product::<usize>() as f64)
        .collect();
    report::count_flops(&spec, &effective).map_err(perr)
}

/// Accuracy-vs-sparsity Pareto frontier of a sweep CSV, as CSV text.
#[pyfunction]
#[pyo3(signature = (path, method = None))]
fn frontier_csv(path: PathBuf, method: Option<String>) -> PyResult<String> {
    let rows = report::read_sweep_rows(&path).map_err(perr)?;
    let rows: Vec<_> = match &method {
        Some(m) => rows.into_iter().filter(|r| &r.method == m).collect(),
        None => rows,
    };
    let frontier = report::pareto_frontier(&rows).map_err(perr)?;
    report::frontier_csv(&frontier).map_err(perr)
}

/// Train one configured run and summarize it.
///
/// `text` is a config file body (defaults when omitted); `overrides` are
/// `key=value` strings applied on top; `out_dir` saves the full artifact set
/// (config, metrics, evals, checkpoint, sweep row) when given.
#[pyfunction]
#[pyo3(signature = (text = None, overrides = vec![], out_dir = None))]
fn run<'py>(
    py: Python<'py>,
    text: Option<&str>,
    overrides: Vec<String>,
    out_dir: Option<PathBuf>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = config::Config::parse(text.unwrap_or("")).map_err(perr)?;
    cfg.apply_overrides(&overrides).map_err(perr)?;
    let out = runner::run_one(&cfg).map_err(perr)?;
    if let Some(dir) = &out_dir {
        runner::save_run(Path::new(dir), &cfg, &out).map_err(perr)?;
    }

    let r = &out.record;
    let d = PyDict::new(py);
    d.set_item("method", &out.row.method)?;
    d.set_item("steps", r.steps_run)?;
    d.set_item("accuracy", r.final_accuracy)?;
    d.set_item("sparsity", r.final_eval_sparsity)?;
    d.set_item("train_sparsity", r.final_train_sparsity)?;
    let per_layer: Vec<(String, f64)> = out
        .model
        .layers
        .iter()
        .zip(&r.per_layer_sparsity)
        .map(|(layer, &sp)| (layer.name.clone(), sp))
        .collect();
    d.set_item("per_layer_sparsity", per_layer)?;
    d.set_item("wall_clock_s", r.wall_clock_s)?;
    d.set_item("config_hash", format!("{:016x}", out.row.config_hash))?;
    d.set_item("failure", r.failure.clone())?;
    Ok(d)
}

/// Run the finite-difference gradient battery; returns (passed, report).
#[pyfunction]
#[pyo3(name = "gradcheck")]
fn run_gradcheck() -> (bool, String) {
    let report = gradcheck::standard_battery();
    (report.passed(), report.to_string())
}

#[pymodule]
fn sparsekit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyPruningSchedule>()?;
    m.add_class::<PyHardConcrete>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(kl_per_weight, m)?)?;
    m.add_function(wrap_pyfunction!(allocate_layer_targets, m)?)?;
    m.add_function(wrap_pyfunction!(weight_info, m)?)?;
    m.add_function(wrap_pyfunction!(count_flops, m)?)?;
    m.add_function(wrap_pyfunction!(dense_flops, m)?)?;
    m.add_function(wrap_pyfunction!(frontier_csv, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(run_gradcheck, m)?)?;
    Ok(())
}
