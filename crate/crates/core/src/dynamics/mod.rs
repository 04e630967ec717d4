//! Time integration of the particle system on `C`, with membership checks
//! instead of projections, and needle variations of a control schedule.
//!
//! Every interval of the grid is integrated by Heun's method. Both Euler
//! points of a step (`C` and `C* + h F(C*)`) are checked for membership;
//! the new state is their average, so it stays in `C` as well. If a check
//! fails, the interval is retried with 2, 4, ... uniform substeps.

mod export;

pub use export::{write_costates_csv, write_trajectory_csv};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::field;
use crate::geometry::{in_state_space, tangent_norm, violation, Ensemble, StateC, TangentVec};
use crate::models::{self, ControlValue, Model};

/// Membership tolerance for every accepted stage point.
pub const STAGE_TOL: f64 = 1e-12;
/// Largest number of halvings of one interval before giving up.
pub const MAX_HALVINGS: u32 = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    pub t0: f64,
    pub t1: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t1: f64, steps: usize) -> Result<Self> {
        let grid = Self { t0, t1, steps };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || !(self.t1 > self.t0) || !self.t0.is_finite() || !self.t1.is_finite() {
            return invalid(format!(
                "time grid needs t0 < t1 and steps >= 1, got [{}, {}] with {} steps",
                self.t0, self.t1, self.steps
            ));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        (self.t1 - self.t0) / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.t1
        } else {
            self.t0 + k as f64 * self.dt()
        }
    }

    /// Index of the node at time `t`, if `t` lies on the grid.
    pub fn node_of(&self, t: f64) -> Option<usize> {
        let r = (t - self.t0) / self.dt();
        let k = r.round();
        if (r - k).abs() <= 1e-9 && k >= 0.0 && k <= self.steps as f64 {
            Some(k as usize)
        } else {
            None
        }
    }

    /// Each interval split into `factor` equal pieces.
    pub fn refined(&self, factor: usize) -> Self {
        Self {
            steps: self.steps * factor,
            ..*self
        }
    }

    /// The grid restricted to `[t0, t_k]`.
    pub fn prefix(&self, k: usize) -> Self {
        Self {
            t0: self.t0,
            t1: self.time(k),
            steps: k,
        }
    }
}

/// A piecewise-constant control: `values[k]` acts on `[t_k, t_{k+1})`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSchedule {
    pub values: Vec<ControlValue>,
}

impl ControlSchedule {
    pub fn constant(steps: usize, value: ControlValue) -> Self {
        Self {
            values: vec![value; steps],
        }
    }

    pub fn from_dictionary(dictionary: &[ControlValue], indices: &[usize]) -> Self {
        Self {
            values: indices.iter().map(|&i| dictionary[i].clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn validate(
        &self,
        model: &dyn Model,
        grid: &TimeGrid,
        agents: usize,
        u_max: f64,
    ) -> Result<()> {
        if self.values.len() != grid.steps {
            return invalid(format!(
                "schedule has {} intervals, grid has {}",
                self.values.len(),
                grid.steps
            ));
        }
        for (k, v) in self.values.iter().enumerate() {
            v.validate(model.control_dim(), agents, u_max)
                .map_err(|e| Error::InvalidArgument(format!("interval {k}: {e}")))?;
        }
        Ok(())
    }

    pub fn refined(&self, factor: usize) -> Self {
        Self {
            values: self
                .values
                .iter()
                .flat_map(|v| std::iter::repeat_n(v.clone(), factor))
                .collect(),
        }
    }

    /// The first `k` intervals.
    pub fn prefix(&self, k: usize) -> Self {
        Self {
            values: self.values[..k].to_vec(),
        }
    }
}

/// One accepted Heun substep: start state and predictor `C* = C + h F(C)`.
#[derive(Clone, Debug)]
pub struct Substep {
    pub t: f64,
    pub h: f64,
    pub start: Ensemble,
    pub predictor: Ensemble,
}

/// Particle states at every grid node together with the accepted substeps.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub states: Vec<Ensemble>,
    /// Number of substeps used on each interval.
    pub substeps: Vec<usize>,
    /// Accumulated running cost at each node.
    pub running: Vec<f64>,
    pub stages: Vec<Vec<Substep>>,
}

impl Trajectory {
    pub fn final_state(&self) -> &Ensemble {
        self.states
            .last()
            .expect("trajectory has at least one node")
    }

    pub fn running_cost(&self) -> f64 {
        *self
            .running
            .last()
            .expect("trajectory has at least one node")
    }

    /// `phi(mu(T)) + int L dt`.
    pub fn total_cost(&self, model: &dyn Model) -> f64 {
        model.terminal(self.final_state()) + self.running_cost()
    }

    pub fn max_violation(&self) -> f64 {
        self.states
            .iter()
            .map(Ensemble::max_violation)
            .fold(0.0, f64::max)
    }

    pub fn particle_path(&self, i: usize) -> Vec<StateC> {
        self.states.iter().map(|e| e.particles[i].clone()).collect()
    }
}

fn check_stage(mu: &Ensemble, what: &str) -> std::result::Result<(), String> {
    for (i, c) in mu.particles.iter().enumerate() {
        if !in_state_space(&mu.layout, c, STAGE_TOL) {
            return Err(format!(
                "{what} of particle {i} leaves the state space (violation {:e})",
                violation(&mu.layout, c)
            ));
        }
    }
    Ok(())
}

fn shifted(mu: &Ensemble, f: &[DVector<f64>], h: f64) -> Ensemble {
    let particles = mu
        .particles
        .iter()
        .zip(f)
        .map(|(c, v)| StateC::from_flat(&mu.layout, (c.to_flat() + v * h).as_slice()))
        .collect();
    Ensemble {
        layout: mu.layout,
        particles,
    }
}

struct StepOutcome {
    predictor: Ensemble,
    next: Ensemble,
    running: f64,
}

fn ensemble_substep(
    model: &dyn Model,
    t: f64,
    h: f64,
    mu: &Ensemble,
    u: &ControlValue,
) -> std::result::Result<StepOutcome, String> {
    let f0 = field::velocities(model, t, mu, u);
    let predictor = shifted(mu, &f0, h);
    check_stage(&predictor, "predictor")?;
    let f1 = field::velocities(model, t + h, &predictor, u);
    check_stage(&shifted(&predictor, &f1, h), "second Euler point")?;
    let avg: Vec<DVector<f64>> = f0.iter().zip(&f1).map(|(a, b)| (a + b) * 0.5).collect();
    let next = shifted(mu, &avg, h);
    check_stage(&next, "Heun update")?;
    let running = 0.5
        * h
        * (field::running_value(model, t, mu, u)
            + field::running_value(model, t + h, &predictor, u));
    Ok(StepOutcome {
        predictor,
        next,
        running,
    })
}

fn integrate_interval(
    model: &dyn Model,
    t: f64,
    dt: f64,
    mu: &Ensemble,
    u: &ControlValue,
) -> Result<(Vec<Substep>, Ensemble, f64)> {
    let mut last_err = String::new();
    for level in 0..=MAX_HALVINGS {
        let m = 1usize << level;
        let h = dt / m as f64;
        let mut cur = mu.clone();
        let mut stages = Vec::with_capacity(m);
        let mut running = 0.0;
        let mut failed = false;
        for s in 0..m {
            let ts = t + s as f64 * h;
            match ensemble_substep(model, ts, h, &cur, u) {
                Ok(out) => {
                    stages.push(Substep {
                        t: ts,
                        h,
                        start: cur,
                        predictor: out.predictor,
                    });
                    running += out.running;
                    cur = out.next;
                }
                Err(e) => {
                    last_err = e;
                    failed = true;
                    break;
                }
            }
        }
        if !failed {
            return Ok((stages, cur, running));
        }
    }
    Err(Error::StepSizeFailure {
        t,
        detail: format!("{last_err} after {MAX_HALVINGS} halvings"),
    })
}

fn check_problem(
    model: &dyn Model,
    grid: &TimeGrid,
    mu0: &Ensemble,
    schedule: &ControlSchedule,
) -> Result<()> {
    grid.validate()?;
    if mu0.layout != model.layout() {
        return invalid("initial ensemble does not match the model layout");
    }
    mu0.validate(1e-10)?;
    if schedule.len() != grid.steps {
        return invalid(format!(
            "schedule has {} intervals, grid has {}",
            schedule.len(),
            grid.steps
        ));
    }
    for v in &schedule.values {
        if v.dim() != model.control_dim() {
            return invalid("schedule control dimension does not match the model");
        }
        if let ControlValue::OpenLoop { values } = v {
            if values.len() != mu0.len() {
                return invalid("open-loop control does not cover every agent");
            }
        }
    }
    Ok(())
}

/// Solves the particle system `dc_i/dt = A(t, mu(t), c_i, u(t, c_i))`.
pub fn solve_state(
    model: &dyn Model,
    grid: &TimeGrid,
    mu0: &Ensemble,
    schedule: &ControlSchedule,
) -> Result<Trajectory> {
    check_problem(model, grid, mu0, schedule)?;
    let dt = grid.dt();
    let mut states = Vec::with_capacity(grid.steps + 1);
    let mut stages = Vec::with_capacity(grid.steps);
    let mut substeps = Vec::with_capacity(grid.steps);
    let mut running = Vec::with_capacity(grid.steps + 1);
    states.push(mu0.clone());
    running.push(0.0);
    for k in 0..grid.steps {
        let (st, next, r) =
            integrate_interval(model, grid.time(k), dt, &states[k], &schedule.values[k])?;
        substeps.push(st.len());
        stages.push(st);
        running.push(running[k] + r);
        states.push(next);
    }
    Ok(Trajectory {
        grid: *grid,
        states,
        substeps,
        running,
        stages,
    })
}

/// One invariance-preserving step of a single state in the frozen measure `mu`.
pub fn step_invariant(
    model: &dyn Model,
    t: f64,
    mu: &Ensemble,
    c: &StateC,
    u: &ControlValue,
    dt: f64,
    agent: usize,
) -> Result<StateC> {
    models::check_inputs(model, mu, c)?;
    if !(dt > 0.0) {
        return invalid("step_invariant needs dt > 0");
    }
    let layout = model.layout();
    if !in_state_space(&layout, c, 1e-10) {
        return invalid("step_invariant: initial state is outside the state space");
    }
    let euler = |t: f64, c: &StateC, h: f64| -> (DVector<f64>, StateC) {
        let f = models::closed_velocity(model, t, mu, agent, c, u);
        let next = StateC::from_flat(&layout, (c.to_flat() + &f * h).as_slice());
        (f, next)
    };
    for level in 0..=MAX_HALVINGS {
        let m = 1usize << level;
        let h = dt / m as f64;
        let mut cur = c.clone();
        let mut ok = true;
        for s in 0..m {
            let ts = t + s as f64 * h;
            let (f0, pred) = euler(ts, &cur, h);
            let (f1, second) = euler(ts + h, &pred, h);
            let next =
                StateC::from_flat(&layout, (cur.to_flat() + (f0 + f1) * (0.5 * h)).as_slice());
            if ![&pred, &second, &next]
                .iter()
                .all(|p| in_state_space(&layout, p, STAGE_TOL))
            {
                ok = false;
                break;
            }
            cur = next;
        }
        if ok {
            return Ok(cur);
        }
    }
    Err(Error::StepSizeFailure {
        t,
        detail: format!("single-state step left the state space after {MAX_HALVINGS} halvings"),
    })
}

/// Needle variation: control `omega` on the window `[tau - eps, tau]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeedleSpec {
    pub tau: f64,
    pub eps: f64,
    pub omega: ControlValue,
}

impl NeedleSpec {
    /// Grid nodes `(start, end)` of the window.
    pub fn window(&self, grid: &TimeGrid) -> Result<(usize, usize)> {
        if !(self.eps >= 0.0) {
            return invalid("needle width must be >= 0");
        }
        if !(self.tau > grid.t0 && self.tau <= grid.t1 + 1e-12 * grid.dt()) {
            return invalid(format!("needle time {} is not in (t0, t1]", self.tau));
        }
        if self.tau - self.eps < grid.t0 - 1e-9 * grid.dt() {
            return invalid("needle window starts before t0");
        }
        if self.eps > 0.0 && self.eps < grid.dt() * (1.0 - 1e-9) {
            return invalid(format!(
                "needle width {} is below the grid step {}; refine the grid first",
                self.eps,
                grid.dt()
            ));
        }
        let end = grid.node_of(self.tau).ok_or_else(|| {
            Error::InvalidArgument(format!("needle time {} is not a grid node", self.tau))
        })?;
        let start = grid.node_of(self.tau - self.eps).ok_or_else(|| {
            Error::InvalidArgument("needle width is not a multiple of the grid step".into())
        })?;
        Ok((start, end))
    }
}

/// The schedule with `omega` on the needle window and unchanged elsewhere.
pub fn needle_control(
    grid: &TimeGrid,
    schedule: &ControlSchedule,
    spec: &NeedleSpec,
) -> Result<ControlSchedule> {
    if schedule.len() != grid.steps {
        return invalid("schedule does not match the grid");
    }
    let (start, end) = spec.window(grid)?;
    let mut out = schedule.clone();
    for v in &mut out.values[start..end] {
        *v = spec.omega.clone();
    }
    Ok(out)
}

/// Grid and schedule with every interval split into `factor` pieces.
pub fn refine(
    grid: &TimeGrid,
    schedule: &ControlSchedule,
    factor: usize,
) -> (TimeGrid, ControlSchedule) {
    (grid.refined(factor), schedule.refined(factor))
}

/// `F(tau, c_i) = A(tau, mu(tau), c_i, omega(c_i)) - A(tau, mu(tau), c_i, u(tau, c_i))`,
/// with `u(tau)` the control on the interval ending at `tau`.
pub fn needle_field(
    model: &dyn Model,
    traj: &Trajectory,
    schedule: &ControlSchedule,
    spec: &NeedleSpec,
) -> Result<Vec<TangentVec>> {
    let (_, end) = spec.window(&traj.grid)?;
    let mu = &traj.states[end];
    let t = traj.grid.time(end);
    let base = &schedule.values[end - 1];
    let layout = model.layout();
    Ok(mu
        .particles
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let a = models::closed_velocity(model, t, mu, i, c, &spec.omega)
                - models::closed_velocity(model, t, mu, i, c, base);
            TangentVec::from_flat(&layout, a.as_slice())
        })
        .collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct NeedleResponse {
    /// `(c_eps(tau) - c(tau)) / eps` per particle.
    pub quotient: Vec<TangentVec>,
    /// The first-order limit `F(tau, c_i)`.
    pub limit: Vec<TangentVec>,
    /// Largest ground-norm distance between quotient and limit.
    pub gap: f64,
}

pub fn needle_response(
    model: &dyn Model,
    grid: &TimeGrid,
    mu0: &Ensemble,
    schedule: &ControlSchedule,
    spec: &NeedleSpec,
) -> Result<NeedleResponse> {
    if !(spec.eps > 0.0) {
        return invalid("needle response needs eps > 0");
    }
    let (_, end) = spec.window(grid)?;
    let short = grid.prefix(end);
    let base = solve_state(model, &short, mu0, &schedule.prefix(end))?;
    let varied = needle_control(grid, schedule, spec)?;
    let pert = solve_state(model, &short, mu0, &varied.prefix(end))?;
    let layout = model.layout();
    let quotient: Vec<TangentVec> = base
        .final_state()
        .particles
        .iter()
        .zip(&pert.final_state().particles)
        .map(|(a, b)| {
            let q = (b.to_flat() - a.to_flat()) / spec.eps;
            TangentVec::from_flat(&layout, q.as_slice())
        })
        .collect();
    let limit = needle_field(model, &base, &schedule.prefix(end), spec)?;
    let gap = quotient
        .iter()
        .zip(&limit)
        .map(|(q, l)| {
            let d = q.to_flat() - l.to_flat();
            tangent_norm(&layout, &TangentVec::from_flat(&layout, d.as_slice()))
        })
        .fold(0.0, f64::max);
    Ok(NeedleResponse {
        quotient,
        limit,
        gap,
    })
}
