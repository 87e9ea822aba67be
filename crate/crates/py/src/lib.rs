//! Python bindings. The module is importable as `grpo_lab` once built with
//! maturin; see `python/smoke_test.py`.

use std::path::PathBuf;
use std::sync::Arc;

use grpo_lab::config::RunConfigFile;
use grpo_lab::experiments::{run_command, Command, ExperimentError};
use grpo_lab::oracle::exact_j_and_grad;
use grpo_lab::trainer::{run, TrainError};
use grpo_lab::{
    enumerate, estimate_gradient, sample_group, sample_trajectory, Algorithm, LabError, PolicyParams, ReferencePolicy,
    RewardSpec, Sequence, Vocab, DEFAULT_ENUMERATION_BUDGET,
};
use pyo3::exceptions::{PyFloatingPointError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn lab_err(e: LabError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn experiment_err(e: ExperimentError) -> PyErr {
    match e {
        ExperimentError::Lab(e) => lab_err(e),
        ExperimentError::Io { .. } => PyOSError::new_err(e.to_string()),
        ExperimentError::NumericAbort { .. } => PyFloatingPointError::new_err(e.to_string()),
    }
}

/// Shape of a tabular policy: vocabulary, horizon and prompt count.
#[pyclass(name = "Layout", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyLayout {
    inner: Arc<grpo_lab::Layout>,
}

#[pymethods]
impl PyLayout {
    #[new]
    #[pyo3(signature = (vocab_size, horizon, eos=None, prompts=1))]
    fn new(vocab_size: usize, horizon: usize, eos: Option<usize>, prompts: usize) -> PyResult<Self> {
        let vocab = Vocab::new(vocab_size, eos).map_err(lab_err)?;
        let inner = grpo_lab::Layout::new(vocab, horizon, prompts).map_err(lab_err)?;
        Ok(Self { inner: Arc::new(inner) })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn rows(&self) -> usize {
        self.inner.rows()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon()
    }

    #[getter]
    fn prompts(&self) -> usize {
        self.inner.prompts()
    }

    /// All complete sequences for `prompt`, as token lists.
    #[pyo3(signature = (prompt=0))]
    fn trajectories(&self, prompt: usize) -> PyResult<Vec<Vec<usize>>> {
        let space = enumerate(&self.inner, prompt, DEFAULT_ENUMERATION_BUDGET).map_err(lab_err)?;
        Ok(space.sequences().iter().map(|s| s.tokens().to_vec()).collect())
    }

    fn __repr__(&self) -> String {
        let v = self.inner.vocab();
        format!(
            "Layout(vocab_size={}, horizon={}, eos={:?}, prompts={})",
            v.size,
            self.inner.horizon(),
            v.eos,
            self.inner.prompts()
        )
    }
}

/// Softmax logits, one row per (prompt, prefix) state.
#[pyclass(name = "Policy", skip_from_py_object)]
#[derive(Clone)]
struct PyPolicy {
    inner: PolicyParams,
}

#[pymethods]
impl PyPolicy {
    #[staticmethod]
    fn zeros(layout: &PyLayout) -> Self {
        Self {
            inner: PolicyParams::zeros(layout.inner.clone()),
        }
    }

    #[staticmethod]
    #[pyo3(signature = (layout, scale=1.0, seed=0))]
    fn random(layout: &PyLayout, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            inner: PolicyParams::random(layout.inner.clone(), scale, &mut rng),
        }
    }

    #[staticmethod]
    fn from_list(layout: &PyLayout, logits: Vec<f64>) -> PyResult<Self> {
        let inner = PolicyParams::from_vec(layout.inner.clone(), logits).map_err(lab_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn layout(&self) -> PyLayout {
        PyLayout {
            inner: self.inner.layout().clone(),
        }
    }

    fn params(&self) -> Vec<f64> {
        self.inner.as_slice().to_vec()
    }

    fn row_probs(&self, row: usize) -> PyResult<Vec<f64>> {
        if row >= self.inner.layout().rows() {
            return Err(PyValueError::new_err(format!("row {row} out of range")));
        }
        Ok(self.inner.row_probs(row))
    }

    /// `log π(tokens | prompt)`.
    #[pyo3(signature = (tokens, prompt=0))]
    fn log_prob(&self, tokens: Vec<usize>, prompt: usize) -> PyResult<f64> {
        let seq = Sequence::new(self.inner.layout(), prompt, tokens).map_err(lab_err)?;
        grpo_lab::trajectory::trajectory_logprob(&self.inner, &seq).map_err(lab_err)
    }

    #[pyo3(signature = (prompt=0, seed=0))]
    fn sample(&self, prompt: usize, seed: u64) -> PyResult<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = sample_trajectory(&self.inner, prompt, &mut rng).map_err(lab_err)?;
        Ok(t.sequence.tokens().to_vec())
    }

    fn __len__(&self) -> usize {
        self.inner.dim()
    }
}

/// Terminal reward built from a spec dict such as
/// `{"kind": "target-sequence", "target": [1, 2, 1]}`.
#[pyclass(name = "Reward", frozen)]
struct PyReward {
    inner: grpo_lab::Reward,
    layout: Arc<grpo_lab::Layout>,
}

#[pymethods]
impl PyReward {
    #[new]
    fn new(layout: &PyLayout, spec: &Bound<'_, PyAny>) -> PyResult<Self> {
        let text: String = spec.py().import("json")?.call_method1("dumps", (spec,))?.extract()?;
        let spec: RewardSpec =
            serde_json::from_str(&text).map_err(|e| PyValueError::new_err(format!("reward spec: {e}")))?;
        let inner = grpo_lab::Reward::new(spec, &layout.inner).map_err(lab_err)?;
        Ok(Self {
            inner,
            layout: layout.inner.clone(),
        })
    }

    #[pyo3(signature = (tokens, prompt=0))]
    fn __call__(&self, tokens: Vec<usize>, prompt: usize) -> PyResult<f64> {
        let seq = Sequence::new(&self.layout, prompt, tokens).map_err(lab_err)?;
        self.inner.evaluate(&seq).map_err(lab_err)
    }
}

/// Exact `J`, its gradient and the KL-regularized versions for one prompt.
#[pyfunction]
#[pyo3(signature = (policy, reward, prompt=0, beta=0.0, reference=None))]
fn exact<'py>(
    py: Python<'py>,
    policy: &PyPolicy,
    reward: &PyReward,
    prompt: usize,
    beta: f64,
    reference: Option<&PyPolicy>,
) -> PyResult<Bound<'py, PyDict>> {
    let space = enumerate(policy.inner.layout(), prompt, DEFAULT_ENUMERATION_BUDGET).map_err(lab_err)?;
    let reference = ReferencePolicy::new(reference.unwrap_or(policy).inner.clone());
    let e = exact_j_and_grad(&policy.inner, &space, &reward.inner, beta, &reference);
    let out = PyDict::new(py);
    out.set_item("j", e.j)?;
    out.set_item("grad_j", e.grad_j)?;
    out.set_item("kl", e.kl)?;
    out.set_item("j_kl", e.j_kl)?;
    out.set_item("grad_j_kl", e.grad_j_kl)?;
    Ok(out)
}

/// One Monte Carlo gradient estimate from `groups` groups drawn at `theta_old`,
/// with the algorithm's default clipping.
#[pyfunction]
#[pyo3(signature = (theta, theta_old, reward, algorithm="tic-grpo", group_size=8, groups=1, beta=0.0, seed=0))]
#[allow(clippy::too_many_arguments)]
fn estimate<'py>(
    py: Python<'py>,
    theta: &PyPolicy,
    theta_old: &PyPolicy,
    reward: &PyReward,
    algorithm: &str,
    group_size: usize,
    groups: usize,
    beta: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let alg: Algorithm = algorithm.parse().map_err(lab_err)?;
    let mut cfg = grpo_lab::TrainConfig::new(alg);
    cfg.beta = beta;
    let spec = cfg.estimator();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = (0..groups)
        .map(|_| sample_group(&theta_old.inner, 0, group_size, &reward.inner, cfg.delta, &mut rng))
        .collect::<Result<Vec<_>, _>>()
        .map_err(lab_err)?;
    let reference = ReferencePolicy::new(theta_old.inner.clone());
    let g = estimate_gradient(&theta.inner, &theta_old.inner, &batch, &spec, &reference).map_err(lab_err)?;
    let out = PyDict::new(py);
    out.set_item("gradient", g.vector)?;
    out.set_item("clip_fraction", g.diagnostics.clip_fraction)?;
    out.set_item("mean_ratio", g.diagnostics.mean_ratio)?;
    out.set_item("max_ratio", g.diagnostics.max_ratio)?;
    Ok(out)
}

fn parse_config(config: &str, seed: Option<u64>) -> PyResult<RunConfigFile> {
    let cfg = RunConfigFile::from_toml_str(config).map_err(lab_err)?;
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

/// Trains in memory from a TOML config and returns the learning curve.
#[pyfunction]
#[pyo3(signature = (config, seed=None))]
fn train<'py>(py: Python<'py>, config: &str, seed: Option<u64>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = parse_config(config, seed)?;
    let task = cfg.task.build(&cfg.reward, cfg.train.log_exact).map_err(lab_err)?;
    let init = cfg.task.init_params(&task.layout).map_err(lab_err)?;
    let reference = ReferencePolicy::new(init.clone());
    let log = py
        .detach(|| run(&cfg.train, &task, init, &reference))
        .map_err(|e| match e {
            TrainError::Lab(e) => lab_err(e),
            e @ TrainError::NumericAbort { .. } => PyFloatingPointError::new_err(e.to_string()),
        })?;
    let out = PyDict::new(py);
    out.set_item("j", log.j_series())?;
    out.set_item("final_j", log.final_j)?;
    out.set_item("mean_grad_norm_sq", log.grad_norm_statistic(0))?;
    out.set_item("final_params", log.final_params.as_slice().to_vec())?;
    Ok(out)
}

/// Runs `train`, `bias-study`, `decompose` or `sweep` into `run_dir` and
/// returns the summary as a dict.
#[pyfunction]
#[pyo3(signature = (command, config, run_dir, seed=None))]
fn run_experiment<'py>(
    py: Python<'py>,
    command: &str,
    config: &str,
    run_dir: PathBuf,
    seed: Option<u64>,
) -> PyResult<Bound<'py, PyAny>> {
    let command = match command {
        "train" => Command::Train,
        "bias-study" => Command::BiasStudy,
        "decompose" => Command::Decompose,
        "sweep" => Command::Sweep,
        other => return Err(PyValueError::new_err(format!("unknown command `{other}`"))),
    };
    let cfg = parse_config(config, seed)?;
    let outcome = py
        .detach(|| run_command(command, &cfg, &run_dir))
        .map_err(experiment_err)?;
    py.import("json")?.call_method1("loads", (outcome.summary.to_string(),))
}

#[pymodule]
#[pyo3(name = "grpo_lab")]
fn grpo_lab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyLayout>()?;
    m.add_class::<PyPolicy>()?;
    m.add_class::<PyReward>()?;
    m.add_function(wrap_pyfunction!(exact, m)?)?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add(
        "ALGORITHMS",
        Algorithm::ALL.iter().map(|a| a.name()).collect::<Vec<_>>(),
    )?;
    Ok(())
}
