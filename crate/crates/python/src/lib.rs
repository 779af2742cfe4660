//! Python bindings: privacy primitives, the accountant, dataset generation
//! and config-driven training.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use dppeft::accountant::{self, Composition, PrivacyReport, RdpLedger};
use dppeft::dataio::{generate_dataset, DatasetManifest};
use dppeft::harness::{self, runner, RunConfig};
use dppeft::model::{BackboneSpec, ProjectionSpec};
use dppeft::objective::GradientDistStats;
use dppeft::{dp, objective, Error};

fn py_err(e: Error) -> PyErr {
    match e.exit_code() {
        2 => PyArithmeticError::new_err(e.to_string()),
        3 => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for dppeft::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Rescales `g` to norm at most `clip_c`.
#[pyfunction]
fn clip(g: Vec<f64>, clip_c: f64) -> PyResult<Vec<f64>> {
    dp::clip(&g, clip_c).py()
}

/// Noise variance `σ²C²/α_k` for one task.
#[pyfunction]
fn allocate_variance(sigma: f64, clip_c: f64, alpha_k: f64) -> PyResult<f64> {
    dp::allocate_variance(sigma, clip_c, alpha_k).py()
}

/// Clipped, noised mean of per-sample gradients.
#[pyfunction]
#[pyo3(signature = (grads, clip_c, sigma, alpha_k, seed, step = 0, task = 0))]
fn privatize(
    grads: Vec<Vec<f64>>,
    clip_c: f64,
    sigma: f64,
    alpha_k: f64,
    seed: u64,
    step: u64,
    task: u64,
) -> PyResult<Vec<f64>> {
    let clipped = grads
        .iter()
        .map(|g| dp::clip(g, clip_c))
        .collect::<dppeft::Result<Vec<_>>>()
        .py()?;
    let key = dp::NoiseKey { seed, step, task };
    Ok(dp::privatize_clipped(&clipped, task as usize, clip_c, sigma, alpha_k, key)
        .py()?
        .g_hat)
}

#[pyfunction]
fn effective_sigma(sigma: f64, alpha_k: f64) -> PyResult<f64> {
    accountant::effective_sigma(sigma, alpha_k).py()
}

#[pyfunction]
fn rdp_gaussian(order: f64, sigma_eff: f64) -> PyResult<f64> {
    accountant::rdp_gaussian(order, sigma_eff).py()
}

#[pyfunction]
fn rdp_subsampled_gaussian(order: f64, sigma_eff: f64, q: f64) -> PyResult<f64> {
    accountant::rdp_subsampled_gaussian(order, sigma_eff, q).py()
}

/// KL penalty from the clipped per-sample gradients of one batch.
#[pyfunction]
fn gradient_kl(clipped: Vec<Vec<f64>>, sigma: f64, clip_c: f64, alpha_k: f64) -> PyResult<f64> {
    let stats = GradientDistStats::from_clipped(&clipped, 0).py()?;
    Ok(objective::gradient_kl(&stats, sigma, clip_c, alpha_k).py()?.value)
}

#[pyfunction]
#[pyo3(signature = (input_dim, hidden_dim, classes_per_task, rank, heads_trainable = true))]
fn trainable_fraction(
    input_dim: usize,
    hidden_dim: usize,
    classes_per_task: Vec<usize>,
    rank: usize,
    heads_trainable: bool,
) -> PyResult<f64> {
    let spec = BackboneSpec::new(input_dim, hidden_dim, classes_per_task, 0).py()?;
    dppeft::model::trainable_fraction(&spec, &ProjectionSpec::new(rank, heads_trainable)).py()
}

fn report_dict<'py>(py: Python<'py>, r: &PrivacyReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("epsilon", r.epsilon)?;
    d.set_item("order", r.order)?;
    d.set_item("delta", r.delta)?;
    d.set_item("composition", r.composition.to_string())?;
    d.set_item(
        "per_task",
        r.per_task.iter().map(|t| (t.epsilon, t.order)).collect::<Vec<_>>(),
    )?;
    Ok(d)
}

/// RDP ledger over the default order grid.
#[pyclass(name = "Accountant")]
struct PyAccountant {
    ledger: RdpLedger,
}

#[pymethods]
impl PyAccountant {
    #[new]
    fn new(num_tasks: usize) -> PyResult<Self> {
        Ok(Self {
            ledger: RdpLedger::new(accountant::default_orders(), num_tasks).py()?,
        })
    }

    #[pyo3(signature = (task, sigma_eff, q, count = 1))]
    fn record_step(&mut self, task: usize, sigma_eff: f64, q: f64, count: u64) -> PyResult<()> {
        self.ledger.record_steps(task, sigma_eff, q, count).py()
    }

    fn steps(&self, task: usize) -> u64 {
        self.ledger.steps(task)
    }

    fn orders(&self) -> Vec<f64> {
        self.ledger.orders().to_vec()
    }

    fn task_rdp(&self, task: usize) -> PyResult<Vec<f64>> {
        self.ledger.task_rdp(task).py()
    }

    #[pyo3(signature = (delta, composition = "parallel"))]
    fn report<'py>(&self, py: Python<'py>, delta: f64, composition: &str) -> PyResult<Bound<'py, PyDict>> {
        let comp: Composition = composition.parse().py()?;
        report_dict(py, &accountant::to_eps_delta(&self.ledger, delta, comp).py()?)
    }
}

/// Privacy report of a planned run described by a config file.
#[pyfunction]
fn audit<'py>(py: Python<'py>, config_path: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let cfg = RunConfig::load(&config_path).py()?;
    report_dict(py, &harness::audit(&cfg).py()?)
}

/// Generates a dataset from a manifest file; returns (train, eval) sizes.
#[pyfunction]
#[pyo3(signature = (manifest_path, out_dir = None))]
fn generate(manifest_path: PathBuf, out_dir: Option<PathBuf>) -> PyResult<(usize, usize)> {
    let ds = match out_dir {
        Some(out) => runner::gen_data(&manifest_path, &out).py()?,
        None => generate_dataset(&DatasetManifest::load(&manifest_path).py()?).py()?,
    };
    Ok((ds.train.len(), ds.eval.len()))
}

/// Trains from a config file, writing artifacts to its `out_dir`.
#[pyfunction]
fn train<'py>(py: Python<'py>, config_path: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let cfg = RunConfig::load(&config_path).py()?;
    let (outcome, out) = py.detach(|| runner::train_from_config(&cfg)).py()?;
    let d = PyDict::new(py);
    d.set_item("out_dir", out)?;
    d.set_item("accuracy", outcome.final_accuracy())?;
    d.set_item("trainable_fraction", outcome.trainable_fraction)?;
    d.set_item("frozen_unchanged", outcome.frozen_checksum_before == outcome.frozen_checksum_after)?;
    d.set_item("privacy", report_dict(py, &outcome.report)?)?;
    d.set_item(
        "metrics",
        outcome
            .metrics
            .iter()
            .map(|r| (r.step, r.loss_total, r.eps_overall, r.acc_macro))
            .collect::<Vec<_>>(),
    )?;
    d.set_item("adapter", outcome.adapter.as_slice().to_vec())?;
    Ok(d)
}

#[pymodule]
fn dppeft_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(clip, m)?)?;
    m.add_function(wrap_pyfunction!(allocate_variance, m)?)?;
    m.add_function(wrap_pyfunction!(privatize, m)?)?;
    m.add_function(wrap_pyfunction!(effective_sigma, m)?)?;
    m.add_function(wrap_pyfunction!(rdp_gaussian, m)?)?;
    m.add_function(wrap_pyfunction!(rdp_subsampled_gaussian, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_kl, m)?)?;
    m.add_function(wrap_pyfunction!(trainable_fraction, m)?)?;
    m.add_function(wrap_pyfunction!(audit, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_class::<PyAccountant>()?;
    Ok(())
}
