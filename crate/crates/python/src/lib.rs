//! Python bindings: configurations, networks, training and cost accounting.

use std::path::PathBuf;

use iamnn_core::data::Split;
use iamnn_core::config::DataSource;
use iamnn_core::training::threads_from_env;
use iamnn_core::{
    count_flops as core_count_flops, count_params as core_count_params, evaluate as core_evaluate,
    gen_synthetic, halting_rule as core_halting_rule, load_checkpoint, save_checkpoint, Checkpoint, Error,
    FlopConvention, Iterations, Network as CoreNetwork, RunConfig, Tensor, Trainer as CoreTrainer,
};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Plain Python objects (dicts, lists, numbers) from any serializable value.
fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn convention(name: &str) -> PyResult<FlopConvention> {
    match name {
        "mac_as_two" => Ok(FlopConvention::MacAsTwo),
        "multiply_add" => Ok(FlopConvention::MultiplyAdd),
        other => Err(PyValueError::new_err(format!(
            "unknown convention `{other}` (mac_as_two|multiply_add)"
        ))),
    }
}

/// A run configuration in `key = value` text form.
#[pyclass(module = "iamnn", from_py_object)]
#[derive(Clone)]
struct Config {
    inner: RunConfig,
    /// Text this configuration was parsed from; overrides layer onto it.
    source: String,
}

#[pymethods]
impl Config {
    /// Parses configuration text; empty text gives the desk defaults.
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::parse(text).map_err(err)?,
            source: text.to_string(),
        })
    }

    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        Self::new(&format!("preset = {name}\n"))
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        let text = std::fs::read_to_string(&path)
            .map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))?;
        Self::new(&text)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    /// Returns a copy with `key = value` lines applied on top.
    fn with_overrides(&self, text: &str) -> PyResult<Self> {
        let keys: Vec<&str> = text
            .lines()
            .filter_map(|l| l.split_once('=').map(|(k, _)| k.trim()))
            .collect();
        let mut merged: String = self
            .source
            .lines()
            .filter(|l| l.split_once('=').is_none_or(|(k, _)| !keys.contains(&k.trim())))
            .map(|l| format!("{l}\n"))
            .collect();
        merged.push_str(text);
        Self::new(&merged)
    }

    #[getter]
    fn input_shape(&self) -> [usize; 3] {
        self.inner.net.input_shape
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.net.num_classes
    }

    #[getter]
    fn max_iterations(&self) -> Vec<usize> {
        self.inner.net.max_iterations()
    }

    fn __repr__(&self) -> String {
        format!("Config({:?})", self.inner.to_text())
    }
}

/// Halting decision for one sample: scores `h_1..`, cap `M`, slack `epsilon`.
#[pyfunction]
fn halting_rule<'py>(
    py: Python<'py>,
    scores: Vec<f64>,
    max_iterations: usize,
    epsilon: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let t = core_halting_rule(&scores, max_iterations, epsilon).map_err(err)?;
    to_py(py, &t)
}

#[pyfunction]
fn count_params<'py>(py: Python<'py>, config: &Config) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &core_count_params(&config.inner.net))
}

/// FLOPs per sample; `iterations` is "min", "max" or one count per block.
#[pyfunction]
#[pyo3(signature = (config, iterations, convention = "mac_as_two"))]
fn count_flops<'py>(
    py: Python<'py>,
    config: &Config,
    iterations: &Bound<'py, PyAny>,
    convention: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let its = match iterations.extract::<String>() {
        Ok(s) if s == "min" => Iterations::Min,
        Ok(s) if s == "max" => Iterations::Max,
        Ok(s) => return Err(PyValueError::new_err(format!("iterations must be min, max or a list, got `{s}`"))),
        Err(_) => Iterations::PerBlock(iterations.extract()?),
    };
    let f = core_count_flops(&config.inner.net, &its, self::convention(convention)?).map_err(err)?;
    to_py(py, &f)
}

/// A dataset held in memory, already normalized.
#[pyclass(module = "iamnn", skip_from_py_object)]
struct Dataset {
    inner: iamnn_core::Dataset,
}

#[pymethods]
impl Dataset {
    /// Training and validation splits for a synthetic configuration; the
    /// validation split uses the training normalization.
    #[staticmethod]
    fn synthetic(config: &Config) -> PyResult<(Dataset, Dataset)> {
        let (train, val) = splits(&config.inner, None)?;
        Ok((Dataset { inner: train }, Dataset { inner: val }))
    }

    /// A CIFAR split read from the binary files in `data_dir`.
    #[staticmethod]
    #[pyo3(signature = (config, data_dir, train = true))]
    fn cifar(config: &Config, data_dir: PathBuf, train: bool) -> PyResult<Dataset> {
        let (tr, te) = splits(&config.inner, Some(data_dir))?;
        Ok(Dataset {
            inner: if train { tr } else { te },
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }

    #[getter]
    fn noise_levels(&self) -> Vec<f64> {
        self.inner.noise_levels().to_vec()
    }

    /// `(shape, flat values)` of the normalized images.
    fn images(&self) -> (Vec<usize>, Vec<f32>) {
        let t = self.inner.images();
        (t.shape().to_vec(), t.data().to_vec())
    }
}

fn splits(cfg: &RunConfig, dir: Option<PathBuf>) -> PyResult<(iamnn_core::Dataset, iamnn_core::Dataset)> {
    match (cfg.data.source, dir) {
        (DataSource::Synthetic, _) => {
            let train = gen_synthetic(&cfg.data.synthetic).map_err(err)?;
            let val = gen_synthetic(&cfg.data.validation_spec())
                .and_then(|v| v.with_normalization(train.normalization().clone()))
                .map_err(err)?;
            Ok((train, val))
        }
        (DataSource::Cifar(variant), Some(dir)) => {
            let train = iamnn_core::data::load_cifar_dir(&dir, variant, Split::Train, None).map_err(err)?;
            let test =
                iamnn_core::data::load_cifar_dir(&dir, variant, Split::Test, Some(train.normalization().clone()))
                    .map_err(err)?;
            Ok((train, test))
        }
        (DataSource::Cifar(_), None) => Err(PyValueError::new_err("CIFAR data needs a data directory")),
    }
}

/// Network parameters together with their configuration.
#[pyclass(module = "iamnn", skip_from_py_object)]
struct Network {
    inner: CoreNetwork<f32>,
}

#[pymethods]
impl Network {
    #[new]
    #[pyo3(signature = (config, seed = 0))]
    fn new(config: &Config, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: CoreNetwork::new(config.inner.net.clone(), seed).map_err(err)?,
        })
    }

    /// Eval-mode forward pass over `values` laid out as `[B, C, H, W]`.
    /// Returns logits per sample and `N` per block per sample.
    fn predict(&self, values: Vec<f32>, batch: usize) -> PyResult<(Vec<Vec<f32>>, Vec<Vec<usize>>)> {
        let [c, h, w] = self.inner.config().input_shape;
        let x = Tensor::new(&[batch, c, h, w], values).map_err(err)?;
        let p = self.inner.predict(&x).map_err(err)?;
        let k = p.logits.shape()[1];
        let logits = p.logits.data().chunks(k).map(<[f32]>::to_vec).collect();
        let iters = (0..batch).map(|s| p.iterations(s)).collect();
        Ok((logits, iters))
    }

    fn num_params(&self) -> usize {
        self.inner.store().num_scalars()
    }
}

/// Training state: network, optimizer, step counter and batch RNG.
#[pyclass(module = "iamnn", skip_from_py_object)]
struct Trainer {
    inner: CoreTrainer<f32>,
    config: RunConfig,
}

#[pymethods]
impl Trainer {
    #[new]
    fn new(config: &Config) -> PyResult<Self> {
        let cfg = config.inner.clone();
        let net = CoreNetwork::new(cfg.net.clone(), cfg.train.seed).map_err(err)?;
        Ok(Self {
            inner: CoreTrainer::new(net, cfg.train.clone()).map_err(err)?,
            config: cfg,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = load_checkpoint::<f32>(&path).map_err(err)?;
        let config = ck.config.clone();
        Ok(Self {
            inner: ck.into_trainer().map_err(err)?,
            config,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &Checkpoint::from_trainer(&self.inner, &self.config)).map_err(err)
    }

    /// One optimizer step on the next batch; returns the step statistics.
    fn step<'py>(&mut self, py: Python<'py>, data: &Dataset) -> PyResult<Bound<'py, PyAny>> {
        let s = self.inner.step(&data.inner).map_err(err)?;
        to_py(py, &s)
    }

    #[getter]
    fn steps_done(&self) -> usize {
        self.inner.step
    }

    /// Top-1/top-k accuracy and per-sample cost summary on `data`.
    #[pyo3(signature = (data, top_k = 5, convention = "mac_as_two"))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        data: &Dataset,
        top_k: usize,
        convention: &str,
    ) -> PyResult<Bound<'py, PyAny>> {
        let conv = self::convention(convention)?;
        let r = core_evaluate(&self.inner.net, &data.inner, 100, top_k, conv, threads_from_env()).map_err(err)?;
        let out = to_py(py, &r)?;
        out.set_item("cost_summary", to_py(py, &r.costs.summary())?)?;
        Ok(out)
    }

    /// A copy of the current network.
    fn network(&self) -> Network {
        Network {
            inner: self.inner.net.clone(),
        }
    }
}

#[pymodule]
fn iamnn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Config>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Network>()?;
    m.add_class::<Trainer>()?;
    m.add_function(wrap_pyfunction!(halting_rule, m)?)?;
    m.add_function(wrap_pyfunction!(count_params, m)?)?;
    m.add_function(wrap_pyfunction!(count_flops, m)?)?;
    Ok(())
}
