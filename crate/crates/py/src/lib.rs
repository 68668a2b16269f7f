//! Python bindings. Structured values cross the boundary as plain dicts and
//! lists via the stdlib `json` module.

use std::path::{Path, PathBuf};

use pgode::diffcore::{Tape, Tensor};
use pgode::evalkit::{self, TheoryConfig};
use pgode::simkit::{self, SimConfig, Split, SplitSpec, System, SystemParams, TrajectorySample};
use pgode::trainer::{self, TrainConfig};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;

fn to_py(e: pgode::Error) -> PyErr {
    match e {
        pgode::Error::Io { .. } => PyOSError::new_err(e.to_string()),
        e if e.is_validation() => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_object<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(value).map_err(json_err)?;
    py.import("json")?.call_method1("loads", (s,))
}

fn from_object<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let s: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&s).map_err(json_err)
}

fn parse<T: std::str::FromStr<Err = pgode::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py)
}

fn train_config(config: Option<&Bound<'_, PyAny>>) -> PyResult<TrainConfig> {
    let cfg = match config {
        Some(c) => from_object(c)?,
        None => TrainConfig::default(),
    };
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

fn split(data_dir: &Path, name: &str) -> PyResult<Vec<TrajectorySample>> {
    simkit::load_split(data_dir, parse(name)?).map_err(to_py)
}

/// Simulates one system and returns it as a dict with `positions`,
/// `velocities` (`[object][frame] -> [x, y]`) and `edges`.
#[pyfunction]
#[pyo3(signature = (system, alpha, beta, gamma, delta, n_objects=5, n_frames=60, seed=0))]
#[allow(clippy::too_many_arguments)]
fn simulate<'py>(
    py: Python<'py>,
    system: &str,
    alpha: f64,
    beta: f64,
    gamma: f64,
    delta: f64,
    n_objects: usize,
    n_frames: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let params = SystemParams {
        alpha,
        beta,
        gamma_strength: gamma,
        delta,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = simkit::simulate(parse::<System>(system)?, &params, n_objects, n_frames, &SimConfig::default(), &mut rng)
        .map_err(to_py)?;
    to_object(py, &s)
}

#[pyfunction]
fn temporal_embedding(t: usize, d: usize) -> PyResult<Vec<f64>> {
    pgode::encoder::temporal_embedding(t, d).map_err(to_py)
}

/// KL divergence from `N(mean, var)` to the standard normal, summed.
#[pyfunction]
fn gaussian_kl(mean: Vec<f64>, var: Vec<f64>) -> PyResult<f64> {
    if var.iter().any(|v| !(*v > 0.0)) {
        return Err(PyValueError::new_err("variances must be strictly positive"));
    }
    let mut tape = Tape::new();
    let m = tape.constant(Tensor::vector(mean));
    let v = tape.constant(Tensor::vector(var));
    let kl = pgode::objectives::gaussian_kl(&mut tape, m, v).map_err(to_py)?;
    tape.value(kl).item().map_err(to_py)
}

/// Writes every split plus a manifest into `out_dir`; returns the manifest.
#[pyfunction]
#[pyo3(signature = (out_dir, system, seed=0, scale="desk", force=false))]
fn build_dataset<'py>(
    py: Python<'py>,
    out_dir: PathBuf,
    system: &str,
    seed: u64,
    scale: &str,
    force: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let system: System = parse(system)?;
    let spec = match scale {
        "desk" => SplitSpec::desk_scale(system),
        "full" => SplitSpec::full_scale(system),
        other => return Err(PyValueError::new_err(format!("unknown scale {other:?}, expected desk or full"))),
    };
    let m = py
        .detach(|| simkit::build_dataset(&spec, system, seed, &out_dir, force))
        .map_err(to_py)?;
    to_object(py, &m)
}

#[pyfunction]
fn load_split<'py>(py: Python<'py>, data_dir: PathBuf, split: &str) -> PyResult<Bound<'py, PyAny>> {
    let samples = self::split(&data_dir, split)?;
    to_object(py, &samples)
}

/// Perturbation-growth comparison of a prototype mixture against a single
/// network. `config` overrides any of the harness defaults.
#[pyfunction]
#[pyo3(signature = (config=None))]
fn lyapunov<'py>(py: Python<'py>, config: Option<&Bound<'py, PyAny>>) -> PyResult<Bound<'py, PyAny>> {
    let cfg: TheoryConfig = match config {
        Some(c) => from_object(c)?,
        None => TheoryConfig::default(),
    };
    let report = py.detach(|| evalkit::lyapunov_harness(&cfg)).map_err(to_py)?;
    to_object(py, &report)
}

/// A trained model.
#[pyclass(module = "pypgode")]
struct Model {
    inner: trainer::Model,
}

#[pymethods]
impl Model {
    /// Fits on the `train` split of `data_dir`, selecting on `val`. Returns
    /// the best model and the per-epoch history.
    #[staticmethod]
    #[pyo3(signature = (data_dir, config=None))]
    fn train<'py>(
        py: Python<'py>,
        data_dir: PathBuf,
        config: Option<&Bound<'py, PyAny>>,
    ) -> PyResult<(Model, Bound<'py, PyAny>)> {
        let cfg = train_config(config)?;
        let train = split(&data_dir, "train")?;
        let val = split(&data_dir, "val")?;
        let out = py.detach(|| trainer::fit(cfg, &train, &val)).map_err(to_py)?;
        let history = to_object(py, &out.history)?;
        Ok((Model { inner: out.best }, history))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Model> {
        Ok(Model {
            inner: trainer::Model::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_object(py, &self.inner.cfg)
    }

    /// `[sample][object][step] -> [qx, qy, vx, vy]` after the condition window.
    fn predict(&self, py: Python<'_>, data_dir: PathBuf, split: &str, length: usize) -> PyResult<Vec<Vec<Vec<[f64; 4]>>>> {
        let samples = self::split(&data_dir, split)?;
        py.detach(|| self.inner.predict(&samples, length)).map_err(to_py)
    }

    /// Gate weights `[sample][object][prototype]`.
    fn gates(&self, py: Python<'_>, data_dir: PathBuf, split: &str) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let samples = self::split(&data_dir, split)?;
        let gates = py.detach(|| self.inner.gates(&samples)).map_err(to_py)?;
        Ok(gates
            .iter()
            .map(|g| (0..g.rows()).map(|r| g.row(r).to_vec()).collect())
            .collect())
    }

    /// MSE per split, length and variable on the two test splits.
    #[pyo3(signature = (data_dir, lengths=None))]
    fn evaluate<'py>(&self, py: Python<'py>, data_dir: PathBuf, lengths: Option<Vec<usize>>) -> PyResult<Bound<'py, PyAny>> {
        let lengths = lengths.unwrap_or_else(|| evalkit::LENGTHS.to_vec());
        let id = split(&data_dir, Split::TestId.name())?;
        let ood = split(&data_dir, Split::TestOod.name())?;
        let report = py
            .detach(|| evalkit::mse_report(&self.inner, &[(Split::TestId, &id), (Split::TestOod, &ood)], &lengths))
            .map_err(to_py)?;
        to_object(py, &report)
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.cfg;
        format!("Model(k={}, d={}, condition_length={})", c.effective_k(), c.d, c.condition_length)
    }
}

#[pymodule]
pub fn pypgode(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(temporal_embedding, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_kl, m)?)?;
    m.add_function(wrap_pyfunction!(build_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(load_split, m)?)?;
    m.add_function(wrap_pyfunction!(lyapunov, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
