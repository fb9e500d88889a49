//! Python bindings: arm kinematics, noise schedules, trained models and
//! the experiment commands.

use std::path::PathBuf;

use kcgg_core::diffusion::{Model, NoiseSchedule};
use kcgg_core::harness::{self, ExperimentConfig};
use kcgg_core::kinematics::ArmSpec;
use kcgg_core::sampling::{self, Condition, Method, SamplerConfig};
use kcgg_core::sim::{self, DiffusionPlanner, EpisodeOptions, PuckState, TableSpec};
use kcgg_core::Error;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

/// Converts anything serializable into plain Python objects via JSON.
fn to_python<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse_method(name: &str) -> PyResult<Method> {
    match name {
        "unconstrained" => Ok(Method::Unconstrained),
        "projection" => Ok(Method::Projection),
        "kcgg" => Ok(Method::Kcgg),
        other => Err(PyValueError::new_err(format!("unknown method {other:?}"))),
    }
}

fn load_config(path: PathBuf, seed: Option<u64>) -> PyResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&path).map_err(py_err)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

#[pyclass(name = "ArmSpec", module = "kcgg")]
struct PyArmSpec(ArmSpec);

#[pymethods]
impl PyArmSpec {
    /// Defaults to the 3-link air-hockey arm; pass `link_lengths` etc. to
    /// override.
    #[new]
    #[pyo3(signature = (link_lengths=None, base_position=None, joint_limits=None, velocity_limits=None))]
    fn new(
        link_lengths: Option<Vec<f64>>,
        base_position: Option<[f64; 2]>,
        joint_limits: Option<Vec<[f64; 2]>>,
        velocity_limits: Option<Vec<f64>>,
    ) -> PyResult<Self> {
        let d = ArmSpec::default();
        let n = link_lengths.as_ref().map_or(d.joints(), Vec::len);
        let spec = ArmSpec {
            joint_limits: joint_limits.unwrap_or_else(|| {
                if n == d.joints() {
                    d.joint_limits.clone()
                } else {
                    vec![[-std::f64::consts::PI, std::f64::consts::PI]; n]
                }
            }),
            velocity_limits: velocity_limits.unwrap_or_else(|| {
                if n == d.joints() {
                    d.velocity_limits.clone()
                } else {
                    vec![10.0; n]
                }
            }),
            link_lengths: link_lengths.unwrap_or(d.link_lengths),
            base_position: base_position.unwrap_or(d.base_position),
        };
        spec.validate().map_err(py_err)?;
        Ok(PyArmSpec(spec))
    }

    #[getter]
    fn joints(&self) -> usize {
        self.0.joints()
    }

    #[getter]
    fn link_lengths(&self) -> Vec<f64> {
        self.0.link_lengths.clone()
    }

    fn forward_kinematics(&self, q: Vec<f64>) -> PyResult<[f64; 2]> {
        self.0.forward_kinematics(&q).map_err(py_err)
    }

    /// 2×n end-effector Jacobian as two rows.
    fn jacobian(&self, q: Vec<f64>) -> PyResult<[Vec<f64>; 2]> {
        self.0.fk_jacobian(&q).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("ArmSpec(link_lengths={:?})", self.0.link_lengths)
    }
}

#[pyclass(name = "NoiseSchedule", module = "kcgg")]
struct PyNoiseSchedule(NoiseSchedule);

#[pymethods]
impl PyNoiseSchedule {
    #[staticmethod]
    fn cosine(steps: usize) -> PyResult<Self> {
        NoiseSchedule::cosine(steps).map(PyNoiseSchedule).map_err(py_err)
    }

    fn restride(&self, steps: usize) -> PyResult<Self> {
        self.0.restride(steps).map(PyNoiseSchedule).map_err(py_err)
    }

    /// `(c_τ, c_0)` of the posterior mean at position `i`.
    fn posterior_coefficients(&self, i: usize) -> PyResult<(f64, f64)> {
        if i >= self.0.steps() {
            return Err(PyValueError::new_err(format!("position {i} out of range")));
        }
        Ok(self.0.posterior_coefficients(i))
    }

    fn __len__(&self) -> usize {
        self.0.steps()
    }

    #[getter]
    fn alpha_bar(&self) -> Vec<f64> {
        self.0.alpha_bar.clone()
    }

    #[getter]
    fn beta(&self) -> Vec<f64> {
        self.0.beta.clone()
    }

    #[getter]
    fn posterior_sigma(&self) -> Vec<f64> {
        self.0.posterior_sigma.clone()
    }

    #[getter]
    fn train_index(&self) -> Vec<usize> {
        self.0.train_index.clone()
    }
}

#[pyclass(name = "Model", module = "kcgg")]
struct PyModel {
    model: Model,
    schedule: NoiseSchedule,
}

impl PyModel {
    fn condition(&self, label: Option<&str>) -> PyResult<Condition> {
        Condition::parse(label, &self.model.network.architecture().condition_vocabulary).map_err(py_err)
    }
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let model = Model::load(&path).map_err(py_err)?;
        let schedule = model.noise_schedule().map_err(py_err)?;
        Ok(PyModel { model, schedule })
    }

    #[getter]
    fn vocabulary(&self) -> Vec<String> {
        self.model.network.architecture().condition_vocabulary.clone()
    }

    #[getter]
    fn rows(&self) -> usize {
        self.model.rows
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.model.state_dim()
    }

    #[getter]
    fn diffusion_steps(&self) -> usize {
        self.schedule.steps()
    }

    /// Unconstrained samples in physical units, one `rows × state_dim`
    /// nested list per batch element. `condition` is a style name or
    /// `None` for the label marginal.
    #[pyo3(signature = (batch_size=1, steps=None, condition=None, seed=0))]
    fn sample(
        &self,
        batch_size: usize,
        steps: Option<usize>,
        condition: Option<&str>,
        seed: u64,
    ) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let cfg = SamplerConfig {
            seed,
            batch_filter: false,
            ..SamplerConfig::new(Method::Unconstrained, steps.unwrap_or(self.schedule.steps()), batch_size)
        };
        let out = sampling::sample_batch(&self.model.network, &self.schedule, &cfg, self.condition(condition)?, None)
            .map_err(py_err)?;
        (0..batch_size)
            .map(|k| {
                let t = self.model.decode(out.element(k)).map_err(py_err)?;
                Ok((0..t.rows()).map(|r| t.state(r).to_vec()).collect())
            })
            .collect()
    }

    /// Plans once against a launched puck and executes the plan on the
    /// default table; returns the episode record as a dict.
    #[pyo3(signature = (position, velocity, method="kcgg", steps=None, batch_size=8, guidance_scale=1.0, batch_filter=true, condition=None, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn defend<'py>(
        &self,
        py: Python<'py>,
        position: [f64; 2],
        velocity: [f64; 2],
        method: &str,
        steps: Option<usize>,
        batch_size: usize,
        guidance_scale: f64,
        batch_filter: bool,
        condition: Option<&str>,
        seed: u64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let planner = DiffusionPlanner {
            model: &self.model,
            schedule: &self.schedule,
            config: SamplerConfig {
                guidance_scale,
                batch_filter,
                ..SamplerConfig::new(parse_method(method)?, steps.unwrap_or(self.schedule.steps()), batch_size)
            },
            condition: self.condition(condition)?,
        };
        let options = EpisodeOptions {
            horizon: self.model.rows - 1,
            dt: self.model.dt,
            ..EpisodeOptions::default()
        };
        let result = sim::run_episode(
            &TableSpec::default(),
            &ArmSpec::default(),
            &planner,
            PuckState { position, velocity },
            &options,
            0,
            seed,
        )
        .map_err(py_err)?;
        to_python(py, &result)
    }
}

/// Parsed, validated experiment config as a dict.
#[pyfunction]
fn read_config(py: Python<'_>, path: PathBuf) -> PyResult<Bound<'_, PyAny>> {
    to_python(py, &load_config(path, None)?)
}

/// Generates the demonstration set; returns `(demos, attempts, rejected)`.
#[pyfunction]
#[pyo3(signature = (config, seed=None))]
fn generate_data(config: PathBuf, seed: Option<u64>) -> PyResult<(usize, usize, usize)> {
    let (set, stats) = harness::cmd_generate_data(&load_config(config, seed)?).map_err(py_err)?;
    Ok((set.demos.len(), stats.attempts, stats.rejected))
}

/// Trains and saves the model; returns the per-epoch loss curve.
#[pyfunction]
#[pyo3(signature = (config, seed=None))]
fn train(config: PathBuf, seed: Option<u64>) -> PyResult<Vec<f64>> {
    harness::cmd_train(&load_config(config, seed)?).map(|o| o.curve).map_err(py_err)
}

/// Runs the method comparison; returns the metrics rows as dicts.
#[pyfunction]
#[pyo3(signature = (config, seed=None, parallel=1))]
fn evaluate(py: Python<'_>, config: PathBuf, seed: Option<u64>, parallel: usize) -> PyResult<Bound<'_, PyAny>> {
    let out = harness::cmd_evaluate(&load_config(config, seed)?, parallel).map_err(py_err)?;
    to_python(py, &out.report.rows)
}

/// Runs the budget sweep; returns the metrics rows as dicts.
#[pyfunction]
#[pyo3(signature = (config, seed=None, parallel=1))]
fn sweep(py: Python<'_>, config: PathBuf, seed: Option<u64>, parallel: usize) -> PyResult<Bound<'_, PyAny>> {
    let out = harness::cmd_sweep(&load_config(config, seed)?, parallel).map_err(py_err)?;
    to_python(py, &out.report.rows)
}

#[pyfunction]
fn wilson_interval(successes: usize, trials: usize) -> (f64, f64) {
    harness::wilson_interval(successes, trials)
}

#[pyfunction]
fn time_budget_steps(budget_ms: f64, ms_per_step: f64) -> usize {
    sampling::time_budget_steps(budget_ms, ms_per_step)
}

#[pymodule]
fn kcgg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyArmSpec>()?;
    m.add_class::<PyNoiseSchedule>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(read_config, m)?)?;
    m.add_function(wrap_pyfunction!(generate_data, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(wilson_interval, m)?)?;
    m.add_function(wrap_pyfunction!(time_budget_steps, m)?)?;
    Ok(())
}
