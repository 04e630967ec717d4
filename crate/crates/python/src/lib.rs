//! Python bindings: scenarios, simulation, the sweep, the oracle checks and W1.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use convexctrl::cli::{self, Command, ExperimentConfig};
use convexctrl::dynamics::{solve_state, ControlSchedule};
use convexctrl::geometry::{w1_empirical, Ensemble, Layout, StateC};
use convexctrl::models::{
    LeaderFollowerModel, LeaderFollowerParams, Model, ReplicatorModel, ReplicatorParams,
};
use convexctrl::pmp::{forward_backward_sweep, SweepOptions};
use convexctrl::scenarios::{self, Scenario};
use convexctrl::verify::{self, CheckReport};
use convexctrl::{Error, Trajectory};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) | Error::Unsupported(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

type Particle = (Vec<f64>, Vec<f64>);

fn particles_of(mu: &Ensemble) -> Vec<Particle> {
    mu.particles
        .iter()
        .map(|c| (c.x.clone(), c.lam.clone()))
        .collect()
}

fn model_of(family: &str) -> PyResult<Box<dyn Model>> {
    match family {
        "leader_follower" => Ok(Box::new(
            LeaderFollowerModel::new(LeaderFollowerParams::default()).map_err(to_py)?,
        )),
        "replicator" => Ok(Box::new(
            ReplicatorModel::new(ReplicatorParams::default()).map_err(to_py)?,
        )),
        other => Err(PyValueError::new_err(format!(
            "unknown family {other:?}; expected \"leader_follower\" or \"replicator\""
        ))),
    }
}

fn report_dict<'py>(py: Python<'py>, r: &CheckReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("name", &r.name)?;
    d.set_item("passed", r.passed)?;
    d.set_item("instances", r.instances)?;
    d.set_item("worst_error", r.worst_error)?;
    d.set_item("min_slope", r.min_slope())?;
    d.set_item("values", r.values.clone())?;
    d.set_item("seed", r.seed)?;
    d.set_item("covered", r.covered.clone())?;
    d.set_item("failures", r.failures.clone())?;
    Ok(d)
}

/// Equally weighted particles on `R^d x Lambda`.
#[pyclass(name = "Ensemble", module = "convexctrl", skip_from_py_object)]
#[derive(Clone)]
struct PyEnsemble {
    inner: Ensemble,
}

#[pymethods]
impl PyEnsemble {
    /// `kind` is "simplex" or "density"; `particles` is a list of `(x, lam)` pairs.
    #[new]
    #[pyo3(signature = (kind, d, n, particles, lower = 1e-3, upper = 50.0))]
    fn new(
        kind: &str,
        d: usize,
        n: usize,
        particles: Vec<Particle>,
        lower: f64,
        upper: f64,
    ) -> PyResult<Self> {
        let layout = match kind {
            "simplex" => Layout::simplex(d, n),
            "density" => Layout::density(d, n, lower, upper),
            other => return Err(PyValueError::new_err(format!("unknown kind {other:?}"))),
        };
        let states = particles
            .into_iter()
            .map(|(x, lam)| StateC::new(x, lam))
            .collect();
        let inner = Ensemble::new(layout, states).map_err(to_py)?;
        inner.validate(1e-10).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Ensemble(particles={}, d={}, n={})",
            self.inner.len(),
            self.inner.layout.d,
            self.inner.layout.n
        )
    }

    fn particles(&self) -> Vec<Particle> {
        particles_of(&self.inner)
    }

    fn max_violation(&self) -> f64 {
        self.inner.max_violation()
    }

    /// Empirical `W_1` distance to another ensemble of the same size.
    fn w1(&self, other: &PyEnsemble) -> PyResult<f64> {
        w1_empirical(&self.inner, &other.inner).map_err(to_py)
    }
}

/// States at every grid node of a solved problem.
#[pyclass(name = "Trajectory", module = "convexctrl")]
struct PyTrajectory {
    inner: Trajectory,
    terminal: f64,
}

impl PyTrajectory {
    fn new(inner: Trajectory, model: &dyn Model) -> Self {
        let terminal = model.terminal(inner.final_state());
        Self { inner, terminal }
    }
}

#[pymethods]
impl PyTrajectory {
    fn times(&self) -> Vec<f64> {
        (0..=self.inner.grid.steps)
            .map(|k| self.inner.grid.time(k))
            .collect()
    }

    fn states(&self) -> Vec<Vec<Particle>> {
        self.inner.states.iter().map(particles_of).collect()
    }

    fn final_state(&self) -> PyEnsemble {
        PyEnsemble {
            inner: self.inner.final_state().clone(),
        }
    }

    #[getter]
    fn total_cost(&self) -> f64 {
        self.terminal + self.inner.running_cost()
    }

    #[getter]
    fn running_cost(&self) -> f64 {
        self.inner.running_cost()
    }

    #[getter]
    fn terminal_cost(&self) -> f64 {
        self.terminal
    }

    fn max_violation(&self) -> f64 {
        self.inner.max_violation()
    }
}

/// A control problem: model, grid, initial ensemble and control dictionary.
#[pyclass(name = "Scenario", module = "convexctrl")]
struct PyScenario {
    inner: Scenario,
}

impl PyScenario {
    fn schedule(&self, indices: Option<Vec<usize>>) -> PyResult<ControlSchedule> {
        let Some(idx) = indices else {
            return Ok(self.inner.schedule.clone());
        };
        if idx.len() != self.inner.grid.steps
            || idx.iter().any(|&i| i >= self.inner.dictionary.len())
        {
            return Err(PyValueError::new_err(
                "indices must give one dictionary index per interval",
            ));
        }
        Ok(ControlSchedule::from_dictionary(
            &self.inner.dictionary,
            &idx,
        ))
    }
}

#[pymethods]
impl PyScenario {
    /// Leader/follower swarm in the plane, 16 particles, 200 steps.
    #[staticmethod]
    fn steering() -> Self {
        Self {
            inner: scenarios::steering(),
        }
    }

    /// One particle with `x' = u`, `u in {-1, 0, 1}`, cost `x(T)^2`.
    #[staticmethod]
    fn bang() -> Self {
        Self {
            inner: scenarios::bang(),
        }
    }

    /// Leader/follower system without running cost, used for needle variations.
    #[staticmethod]
    #[pyo3(signature = (steps = 200))]
    fn needle(steps: usize) -> Self {
        Self {
            inner: scenarios::needle(steps).0,
        }
    }

    #[staticmethod]
    #[pyo3(signature = (particles = 8))]
    fn replicator(particles: usize) -> Self {
        Self {
            inner: scenarios::replicator(particles),
        }
    }

    /// Problem described by a TOML configuration string.
    #[staticmethod]
    #[pyo3(signature = (text, particles = None))]
    fn from_config(text: &str, particles: Option<usize>) -> PyResult<Self> {
        let config = ExperimentConfig::from_toml_str(text, &PathBuf::from(".")).map_err(to_py)?;
        Ok(Self {
            inner: config.scenario(particles).map_err(to_py)?,
        })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.grid.steps
    }

    #[getter]
    fn horizon(&self) -> (f64, f64) {
        (self.inner.grid.t0, self.inner.grid.t1)
    }

    #[getter]
    fn dictionary_size(&self) -> usize {
        self.inner.dictionary.len()
    }

    fn initial_ensemble(&self) -> PyEnsemble {
        PyEnsemble {
            inner: self.inner.mu0.clone(),
        }
    }

    /// Solves the state equation for dictionary `indices` (the initial schedule by default).
    #[pyo3(signature = (indices = None))]
    fn simulate(&self, indices: Option<Vec<usize>>) -> PyResult<PyTrajectory> {
        let sched = self.schedule(indices)?;
        let model = self.inner.model.as_ref();
        let traj = solve_state(model, &self.inner.grid, &self.inner.mu0, &sched).map_err(to_py)?;
        Ok(PyTrajectory::new(traj, model))
    }

    /// Forward-backward sweep from `init` (all zeros by default); returns the report as a dict.
    #[pyo3(signature = (init = None, damping = 0.5, max_iters = 100, tol = 1e-3))]
    fn optimize<'py>(
        &self,
        py: Python<'py>,
        init: Option<Vec<usize>>,
        damping: f64,
        max_iters: usize,
        tol: f64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let sc = &self.inner;
        let init = init.unwrap_or_else(|| vec![0; sc.grid.steps]);
        let opts = SweepOptions {
            damping,
            max_iters,
            tol,
        };
        let out = forward_backward_sweep(
            sc.model.as_ref(),
            &sc.grid,
            &sc.mu0,
            &init,
            &sc.dictionary,
            &opts,
        )
        .map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("indices", out.indices.clone())?;
        d.set_item("converged", out.report.converged)?;
        d.set_item("status", out.report.status.clone())?;
        d.set_item("iterations", out.report.iterations)?;
        d.set_item("cost_history", out.report.cost_history.clone())?;
        d.set_item("residual_history", out.report.residual_history.clone())?;
        d.set_item("residuals", out.scan.residual.clone())?;
        d.set_item(
            "trajectory",
            PyTrajectory::new(out.trajectory, sc.model.as_ref()),
        )?;
        Ok(d)
    }
}

/// Central differences against the state differentials of a default model.
#[pyfunction]
#[pyo3(signature = (family, trials = 100, seed = 0))]
fn fd_check_cdiff<'py>(
    py: Python<'py>,
    family: &str,
    trials: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let model = model_of(family)?;
    report_dict(py, &verify::fd_check_cdiff(model.as_ref(), trials, seed))
}

/// Particle displacements against the Wasserstein differentials of a default model.
#[pyfunction]
#[pyo3(signature = (family, trials = 100, seed = 0))]
fn fd_check_mugrad<'py>(
    py: Python<'py>,
    family: &str,
    trials: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let model = model_of(family)?;
    report_dict(py, &verify::fd_check_mugrad(model.as_ref(), trials, seed))
}

#[pyfunction]
fn w1_distance(a: &PyEnsemble, b: &PyEnsemble) -> PyResult<f64> {
    a.w1(b)
}

/// Runs a command-line command; returns the exit code.
#[pyfunction]
#[pyo3(signature = (command, config, out = None))]
fn run(command: &str, config: PathBuf, out: Option<PathBuf>) -> PyResult<i32> {
    let command = match command {
        "simulate" => Command::Simulate,
        "optimize" => Command::Optimize,
        "verify" => Command::Verify,
        "converge" => Command::Converge,
        other => return Err(PyValueError::new_err(format!("unknown command {other:?}"))),
    };
    let mut cfg = cli::parse_config(&config).map_err(to_py)?;
    if let Some(dir) = out {
        cfg.output.directory = dir;
    }
    Ok(cli::run_scenario(&cfg, command)
        .map_err(to_py)?
        .status
        .code())
}

#[pymodule]
#[pyo3(name = "convexctrl")]
fn convexctrl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEnsemble>()?;
    m.add_class::<PyTrajectory>()?;
    m.add_class::<PyScenario>()?;
    m.add_function(wrap_pyfunction!(fd_check_cdiff, m)?)?;
    m.add_function(wrap_pyfunction!(fd_check_mugrad, m)?)?;
    m.add_function(wrap_pyfunction!(w1_distance, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
