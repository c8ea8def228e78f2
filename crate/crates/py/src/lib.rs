use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyFloat, PyInt, PyList, PyString, PyTuple};

use ::fedsplit::experiment::{cmd_run, cmd_verify, ExperimentConfig, RunOptions, VerifyOptions};
use ::fedsplit::federation::{analytic_floats, Direction, MessageKind, ModelShape};
use ::fedsplit::nn::{CutSpec, LayerSpec, LayerStack, Task};
use ::fedsplit::partition::{
    calibrate_skew, ks_two_sample, make_iid_partition, make_label_skew_partition, mean_pairwise_ks,
    pairwise_ks, synth_regression, BlobParams, Dataset as CoreDataset, Partition as CorePartition,
    SkewSpec,
};
use ::fedsplit::rng::SeedStreams;
use ::fedsplit::strategies::{Simulation as CoreSimulation, StrategyConfig, StrategyKind};
use ::fedsplit::{FedError, Tensor};

fn err(e: FedError) -> PyErr {
    match e {
        FedError::Io { .. } => PyIOError::new_err(e.to_string()),
        FedError::Numeric { .. } => PyArithmeticError::new_err(e.to_string()),
        FedError::Protocol(_) | FedError::StaleTape { .. } => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_json(obj: &Bound<'_, PyAny>) -> PyResult<serde_json::Value> {
    use serde_json::Value;
    if obj.is_none() {
        return Ok(Value::Null);
    }
    if obj.is_instance_of::<PyBool>() {
        return Ok(Value::Bool(obj.extract()?));
    }
    if obj.is_instance_of::<PyInt>() {
        return Ok(Value::from(obj.extract::<i64>()?));
    }
    if obj.is_instance_of::<PyFloat>() {
        return Ok(Value::from(obj.extract::<f64>()?));
    }
    if obj.is_instance_of::<PyString>() {
        return Ok(Value::String(obj.extract()?));
    }
    if let Ok(d) = obj.cast::<PyDict>() {
        let mut map = serde_json::Map::new();
        for (k, v) in d.iter() {
            map.insert(k.extract::<String>()?, to_json(&v)?);
        }
        return Ok(Value::Object(map));
    }
    if obj.is_instance_of::<PyList>() || obj.is_instance_of::<PyTuple>() {
        let items: Vec<Bound<'_, PyAny>> = obj.extract()?;
        return Ok(Value::Array(
            items.iter().map(to_json).collect::<PyResult<_>>()?,
        ));
    }
    Err(PyValueError::new_err(format!(
        "cannot convert {} to a config value",
        obj.get_type().name()?
    )))
}

fn layer_specs(layers: &Bound<'_, PyAny>) -> PyResult<Vec<LayerSpec>> {
    serde_json::from_value(to_json(layers)?)
        .map_err(|e| PyValueError::new_err(format!("layers: {e}")))
}

fn tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(err)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.batch()).map(|i| t.row(i).to_vec()).collect()
}

/// A labelled dataset.
#[pyclass(module = "fedsplit", skip_from_py_object)]
#[derive(Clone)]
struct Dataset {
    inner: CoreDataset,
}

#[pymethods]
impl Dataset {
    /// Gaussian class blobs.
    #[staticmethod]
    #[pyo3(signature = (n, classes=2, dims=8, separation=3.0, seed=0, modes=1))]
    fn blobs(
        n: usize,
        classes: usize,
        dims: usize,
        separation: f64,
        seed: u64,
        modes: usize,
    ) -> PyResult<Self> {
        let inner = BlobParams {
            n,
            classes,
            dims,
            separation,
            modes,
            seed,
        }
        .generate()
        .map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (n, dims=8, noise=0.1, seed=0))]
    fn regression(n: usize, dims: usize, noise: f64, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: synth_regression(n, dims, noise, seed).map_err(err)?,
        })
    }

    /// Flat feature rows with class indices (`classes` set) or real targets.
    #[new]
    #[pyo3(signature = (features, labels, classes=None))]
    fn new(features: Vec<Vec<f64>>, labels: Vec<f64>, classes: Option<usize>) -> PyResult<Self> {
        let task = match classes {
            Some(classes) => Task::Classification { classes },
            None => Task::Regression,
        };
        let y = Tensor::new(vec![labels.len(), 1], labels).map_err(err)?;
        Ok(Self {
            inner: CoreDataset::new(tensor(features)?, y, task).map_err(err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn features(&self) -> Vec<Vec<f64>> {
        rows(self.inner.features())
    }

    fn labels(&self) -> Vec<f64> {
        self.inner.label_values().to_vec()
    }

    /// Returns `(train, test)`.
    #[pyo3(signature = (test_fraction=0.2, seed=0))]
    fn split(&self, test_fraction: f64, seed: u64) -> PyResult<(Dataset, Dataset)> {
        let (a, b) = self
            .inner
            .train_test_split(test_fraction, &mut SeedStreams::new(seed).stream("split"))
            .map_err(err)?;
        Ok((Dataset { inner: a }, Dataset { inner: b }))
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(len={}, task={:?})",
            self.inner.len(),
            self.inner.task()
        )
    }
}

/// Disjoint index lists, one per institution.
#[pyclass(module = "fedsplit", skip_from_py_object)]
#[derive(Clone)]
struct Partition {
    inner: CorePartition,
    skew_fraction: Option<f64>,
}

#[pymethods]
impl Partition {
    #[new]
    fn new(assignments: Vec<Vec<usize>>, dataset_len: usize) -> PyResult<Self> {
        Ok(Self {
            inner: CorePartition::new(assignments, dataset_len).map_err(err)?,
            skew_fraction: None,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (dataset, institutions, seed=0))]
    fn iid(dataset: &Dataset, institutions: usize, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: make_iid_partition(&dataset.inner, institutions, seed).map_err(err)?,
            skew_fraction: None,
        })
    }

    /// Each institution draws `skew_fraction` of its quota from one label bin.
    #[staticmethod]
    #[pyo3(signature = (dataset, institutions, skew_fraction, seed=0))]
    fn label_skew(
        dataset: &Dataset,
        institutions: usize,
        skew_fraction: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let spec = SkewSpec::balanced(&dataset.inner, institutions, skew_fraction, seed);
        Ok(Self {
            inner: make_label_skew_partition(&dataset.inner, &spec).map_err(err)?,
            skew_fraction: Some(skew_fraction),
        })
    }

    /// Label skew whose mean pairwise KS is closest to `target_ks`.
    #[staticmethod]
    #[pyo3(signature = (dataset, institutions, target_ks, seed=0))]
    fn calibrated(
        dataset: &Dataset,
        institutions: usize,
        target_ks: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let cal = calibrate_skew(&dataset.inner, institutions, target_ks, seed).map_err(err)?;
        Ok(Self {
            inner: make_label_skew_partition(&dataset.inner, &cal.spec).map_err(err)?,
            skew_fraction: Some(cal.spec.skew_fraction),
        })
    }

    #[getter]
    fn assignments(&self) -> Vec<Vec<usize>> {
        self.inner.assignments().to_vec()
    }

    #[getter]
    fn skew_fraction(&self) -> Option<f64> {
        self.skew_fraction
    }

    fn sizes(&self) -> Vec<usize> {
        self.inner.sizes()
    }

    fn mean_ks(&self, dataset: &Dataset) -> PyResult<f64> {
        mean_pairwise_ks(&dataset.inner, &self.inner).map_err(err)
    }

    fn ks_matrix(&self, dataset: &Dataset) -> PyResult<Vec<Vec<f64>>> {
        pairwise_ks(&dataset.inner, &self.inner).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.institutions()
    }
}

/// One strategy run over a partitioned dataset.
#[pyclass(module = "fedsplit")]
struct Simulation {
    inner: CoreSimulation,
}

#[pymethods]
impl Simulation {
    /// `layers` is a list of dicts such as `{"kind": "dense", "units": 16}`;
    /// `options` holds any further strategy keys (`lr`, `batch_size`, ...).
    #[new]
    #[pyo3(signature = (strategy, layers, dataset, partition, seed=0, cut=None, **options))]
    fn new(
        strategy: &str,
        layers: &Bound<'_, PyAny>,
        dataset: &Dataset,
        partition: &Partition,
        seed: u64,
        cut: Option<usize>,
        options: Option<&Bound<'_, PyDict>>,
    ) -> PyResult<Self> {
        let kind: StrategyKind = strategy.parse().map_err(err)?;
        let mut cfg = serde_json::json!({ "kind": kind.as_str() });
        if let Some(c) = cut {
            cfg["cut"] = c.into();
        }
        if let Some(opts) = options {
            for (k, v) in opts.iter() {
                cfg[k.extract::<String>()?] = to_json(&v)?;
            }
        }
        let config: StrategyConfig = serde_json::from_value(cfg)
            .map_err(|e| PyValueError::new_err(format!("strategy: {e}")))?;
        let streams = SeedStreams::new(seed);
        let model = LayerStack::build(
            dataset.inner.feature_dims(),
            &layer_specs(layers)?,
            Some(dataset.inner.task()),
            &mut streams.stream("init"),
        )
        .map_err(err)?;
        let inner = CoreSimulation::new(
            config,
            model,
            dataset.inner.clone(),
            &partition.inner,
            &streams,
        )
        .map_err(err)?;
        Ok(Self { inner })
    }

    /// Runs one epoch and returns its mean training loss.
    fn run_epoch(&mut self, py: Python<'_>) -> PyResult<f64> {
        let inner = &mut self.inner;
        py.detach(|| inner.run_epoch())
            .map(|s| s.mean_loss)
            .map_err(err)
    }

    /// Runs `epochs` epochs and returns the per-epoch loss curve.
    fn train(&mut self, py: Python<'_>, epochs: usize) -> PyResult<Vec<f64>> {
        let inner = &mut self.inner;
        py.detach(|| inner.train(epochs, None)).map_err(err)?;
        Ok(self.inner.loss_curve())
    }

    /// Ends training (split strategies ship the server half to institutions).
    fn finish(&mut self) -> PyResult<()> {
        self.inner.finish().map(|_| ()).map_err(err)
    }

    /// Metrics on `test` as a dict.
    fn evaluate<'py>(&self, py: Python<'py>, test: &Dataset) -> PyResult<Bound<'py, PyDict>> {
        let m = self.inner.evaluate(&test.inner).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item(m.metric_name(), m.primary())?;
        d.set_item("per_institution", m.per_institution)?;
        d.set_item("loss_curve", m.loss_curve)?;
        d.set_item("uplink", m.comm_totals.uplink)?;
        d.set_item("downlink", m.comm_totals.downlink)?;
        d.set_item("peer", m.comm_totals.peer)?;
        Ok(d)
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.epoch()
    }

    /// Scalars sent per direction, optionally restricted to one message kind
    /// (e.g. `"feature_maps"`).
    #[pyo3(signature = (direction, kind=None))]
    fn ledger_total(&self, direction: &str, kind: Option<&str>) -> PyResult<u64> {
        let dir = match direction {
            "uplink" => Direction::Uplink,
            "downlink" => Direction::Downlink,
            "peer" => Direction::Peer,
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown direction {other:?}"
                )))
            }
        };
        let ledger = self.inner.ledger();
        match kind {
            None => Ok(ledger.total(dir)),
            Some(k) => {
                let kind: MessageKind = serde_json::from_value(serde_json::Value::String(k.into()))
                    .map_err(|e| PyValueError::new_err(format!("message kind: {e}")))?;
                Ok(ledger.total_by_kind(dir, kind))
            }
        }
    }

    /// Uplink scalars of one epoch (round).
    fn round_uplink(&self, round: usize) -> u64 {
        self.inner.ledger().round_total(round, Direction::Uplink)
    }

    /// Current weights of every complete network, flattened per tensor.
    fn weights(&self) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let models = self
            .inner
            .snapshot()
            .and_then(|m| m.models())
            .map_err(err)?;
        Ok(models
            .iter()
            .map(|m| {
                m.state_tensors()
                    .iter()
                    .map(|t| t.data().to_vec())
                    .collect()
            })
            .collect())
    }
}

/// KS statistic between two samples.
#[pyfunction]
fn ks_statistic(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    ks_two_sample(&a, &b).map_err(err)
}

/// Closed-form `(per_sample, per_institution, per_iteration)` uplink scalars
/// for a model built from `layers` on `input_dims`.
#[pyfunction]
#[pyo3(signature = (strategy, input_dims, layers, classes, batch_size, institutions_per_round, cut=None))]
fn analytic_uplink(
    strategy: &str,
    input_dims: Vec<usize>,
    layers: &Bound<'_, PyAny>,
    classes: usize,
    batch_size: usize,
    institutions_per_round: usize,
    cut: Option<usize>,
) -> PyResult<(u64, u64, u64)> {
    let kind: StrategyKind = strategy.parse().map_err(err)?;
    let stack = LayerStack::build(
        &input_dims,
        &layer_specs(layers)?,
        Some(Task::Classification { classes }),
        &mut SeedStreams::new(0).stream("init"),
    )
    .map_err(err)?;
    let shape = ModelShape::of(&stack, cut.map(CutSpec)).map_err(err)?;
    let a = analytic_floats(kind, &shape, batch_size, institutions_per_round);
    Ok((a.per_sample, a.per_institution, a.per_iteration))
}

/// Runs an experiment config; returns the result records as JSON text.
#[pyfunction]
#[pyo3(signature = (config_path, seed=None, out=None, parallel_seeds=1))]
fn run_config(
    py: Python<'_>,
    config_path: PathBuf,
    seed: Option<u64>,
    out: Option<PathBuf>,
    parallel_seeds: usize,
) -> PyResult<String> {
    let opts = RunOptions {
        seed,
        out,
        parallel_seeds,
    };
    let outcome = py.detach(|| cmd_run(&config_path, &opts)).map_err(err)?;
    serde_json::to_string(&outcome.records).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Parses and validates config text; returns its hash.
#[pyfunction]
fn config_hash(text: &str) -> PyResult<String> {
    Ok(ExperimentConfig::from_toml(text).map_err(err)?.hash())
}

/// Runs the correctness suite; returns `(passed, table)`.
#[pyfunction]
fn verify(py: Python<'_>) -> PyResult<(bool, String)> {
    let r = py
        .detach(|| cmd_verify(&VerifyOptions::default()))
        .map_err(err)?;
    Ok((r.passed(), r.to_string()))
}

#[pymodule]
fn fedsplit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Partition>()?;
    m.add_class::<Simulation>()?;
    m.add_function(wrap_pyfunction!(ks_statistic, m)?)?;
    m.add_function(wrap_pyfunction!(analytic_uplink, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    m.add_function(wrap_pyfunction!(config_hash, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add(
        "STRATEGIES",
        StrategyKind::ALL
            .iter()
            .map(|k| k.as_str())
            .collect::<Vec<_>>(),
    )?;
    Ok(())
}
