//! Hamiltonians, costate equations and the forward-backward sweep.
//!
//! Costates are mean-field costates `p_i`: the Hamiltonian of an ensemble is
//! `H = (1/N) sum_i <p_i, A(c_i)> - L` and, for a Mayer cost, `p_i(T) =
//! -grad_mu phi(c_i)`. Internally the backward solves run on the
//! finite-particle coordinate covector `P = dJ/dC`, related by
//! `p_i = -N W^{-1} P_i` with `W` the pairing weights.

mod bolza;
mod sweep;

pub use bolza::{augment_ensemble, bolza_augment, AugmentedModel};
pub use sweep::{forward_backward_sweep, SweepOptions, SweepOutcome, SweepReport};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlSchedule, TimeGrid, Trajectory};
use crate::error::{invalid, Error, Result};
use crate::field;
use crate::geometry::{pairing, CostateVec, Ensemble, Layout, TangentVec};
use crate::models::{self, ControlValue, Model};

/// Costates of every particle at every grid node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostatePath {
    pub grid: TimeGrid,
    pub layout: Layout,
    /// `costates[k][i]` is `p_i(t_k)`.
    pub costates: Vec<Vec<CostateVec>>,
}

fn check_costates(model: &dyn Model, mu: &Ensemble, costates: &[CostateVec]) -> Result<()> {
    models::check_inputs(model, mu, &mu.particles[0])?;
    let layout = model.layout();
    if costates.len() != mu.len() {
        return invalid(format!(
            "{} costates for {} particles",
            costates.len(),
            mu.len()
        ));
    }
    if costates
        .iter()
        .any(|p| p.px.len() != layout.d || p.plam.len() != layout.n)
    {
        return invalid("costate has the wrong dimensions");
    }
    Ok(())
}

fn check_control(model: &dyn Model, mu: &Ensemble, u: &ControlValue) -> Result<()> {
    if u.dim() != model.control_dim() {
        return invalid("control dimension does not match the model");
    }
    if let ControlValue::OpenLoop { values } = u {
        if values.len() != mu.len() {
            return invalid("open-loop control does not cover every agent");
        }
    }
    Ok(())
}

/// `(1/N) sum_i <p_i, A(t, mu, c_i, u(c_i))> - L(t, mu, u)`.
pub fn hamiltonian(
    model: &dyn Model,
    t: f64,
    mu: &Ensemble,
    costates: &[CostateVec],
    u: &ControlValue,
) -> Result<f64> {
    check_costates(model, mu, costates)?;
    check_control(model, mu, u)?;
    Ok(hamiltonian_unchecked(model, t, mu, costates, u))
}

fn hamiltonian_unchecked(
    model: &dyn Model,
    t: f64,
    mu: &Ensemble,
    costates: &[CostateVec],
    u: &ControlValue,
) -> f64 {
    let layout = model.layout();
    let vel = field::velocities(model, t, mu, u);
    let n = mu.len() as f64;
    let pa: f64 = costates
        .iter()
        .zip(&vel)
        .map(|(p, a)| {
            pairing(&layout, p, &TangentVec::from_flat(&layout, a.as_slice()))
                .expect("dimensions checked")
        })
        .sum();
    pa / n - field::running_value(model, t, mu, u)
}

/// Gradient of the Hamiltonian with respect to the joint law of `(c, p)`,
/// per particle. The first entry drives the costates (`p' = -first`), the
/// second is the state velocity:
/// `first_i = D_c^* A(c_i)[p_i] + (1/N) sum_k grad_mu^* A(c_k; c_i)[p_k] - grad_mu L(c_i)`.
pub fn hamiltonian_nu_gradient(
    model: &dyn Model,
    t: f64,
    mu: &Ensemble,
    costates: &[CostateVec],
    u: &ControlValue,
) -> Result<Vec<(CostateVec, TangentVec)>> {
    check_costates(model, mu, costates)?;
    check_control(model, mu, u)?;
    let layout = model.layout();
    let n = mu.len();
    let wp: Vec<DVector<f64>> = costates
        .iter()
        .map(|p| layout.costate_to_covector(p))
        .collect();
    let diag = field::diag_jacobians(model, t, mu, u);
    let vel = field::velocities(model, t, mu, u);
    let out = field::par_map(n, |i| {
        let ci = &mu.particles[i];
        let mut g = diag[i].tr_mul(&wp[i]);
        for (k, ck) in mu.particles.iter().enumerate() {
            let gk = model.mu_gradient(t, mu, ck, &u.eval(k, ck), ci);
            g += gk.tr_mul(&wp[k]) / n as f64;
        }
        g -= models::running_mu_covector(model, t, mu, u, i);
        (
            layout.covector_to_costate(g.as_slice()),
            TangentVec::from_flat(&layout, vel[i].as_slice()),
        )
    });
    Ok(out)
}

/// Mayer terminal costates `p_i(T) = -grad_mu phi(mu(T))(c_i)`.
pub fn mayer_terminal(model: &dyn Model, mu: &Ensemble) -> Vec<CostateVec> {
    let layout = model.layout();
    mu.particles
        .iter()
        .map(|c| layout.covector_to_costate((-model.terminal_mu_grad(mu, c)).as_slice()))
        .collect()
}

fn costates_to_covector(layout: &Layout, ps: &[CostateVec]) -> DVector<f64> {
    let n = ps.len() as f64;
    let parts: Vec<DVector<f64>> = ps
        .iter()
        .map(|p| layout.costate_to_covector(p) * (-1.0 / n))
        .collect();
    field::stack(&parts)
}

fn covector_to_costates(layout: &Layout, v: &DVector<f64>) -> Vec<CostateVec> {
    let dim = layout.dim();
    let n = v.len() / dim;
    v.as_slice()
        .chunks(dim)
        .map(|ch| {
            let g: Vec<f64> = ch.iter().map(|x| -(n as f64) * x).collect();
            layout.covector_to_costate(&g)
        })
        .collect()
}

fn check_aligned(model: &dyn Model, traj: &Trajectory, schedule: &ControlSchedule) -> Result<()> {
    if schedule.len() != traj.grid.steps || traj.stages.len() != traj.grid.steps {
        return invalid("schedule and trajectory are not aligned");
    }
    if traj.states[0].layout != model.layout() {
        return invalid("trajectory does not match the model layout");
    }
    Ok(())
}

/// Backward solve of `P' = -J^T P - grad L` from `P(T)` given by `terminal`
/// (as costates), Heun with coefficients at the stored nodes.
pub fn solve_adjoint(
    model: &dyn Model,
    traj: &Trajectory,
    schedule: &ControlSchedule,
    terminal: &[CostateVec],
) -> Result<CostatePath> {
    check_aligned(model, traj, schedule)?;
    check_costates(model, traj.final_state(), terminal)?;
    let layout = model.layout();
    let steps = traj.grid.steps;
    let mut big_p = costates_to_covector(&layout, terminal);
    field::canonicalize_flat(&layout, &mut big_p);
    let mut path = vec![covector_to_costates(&layout, &big_p)];
    let rhs = |t: f64, mu: &Ensemble, u: &ControlValue, p: &DVector<f64>| -> DVector<f64> {
        field::ensemble_jacobian(model, t, mu, u).tr_mul(p)
            + field::running_gradient(model, t, mu, u)
    };
    for k in (0..steps).rev() {
        let u = &schedule.values[k];
        let stages = &traj.stages[k];
        for (j, s) in stages.iter().enumerate().rev() {
            let end = if j + 1 < stages.len() {
                &stages[j + 1].start
            } else {
                &traj.states[k + 1]
            };
            let r1 = rhs(s.t + s.h, end, u, &big_p);
            let mut pred = &big_p + &r1 * s.h;
            field::canonicalize_flat(&layout, &mut pred);
            let r0 = rhs(s.t, &s.start, u, &pred);
            big_p += (r1 + r0) * (0.5 * s.h);
            field::canonicalize_flat(&layout, &mut big_p);
        }
        path.push(covector_to_costates(&layout, &big_p));
    }
    path.reverse();
    Ok(CostatePath {
        grid: traj.grid,
        layout,
        costates: path,
    })
}

/// Gradient of the total cost with respect to the control values, one
/// entry per interval: a single vector for constant controls, one vector
/// per agent for open-loop controls.
#[derive(Clone, Debug, Serialize)]
pub struct ControlGradient {
    pub intervals: Vec<Vec<Vec<f64>>>,
    /// `dJ/dC(0)` as a flat coordinate covector.
    pub initial: Vec<f64>,
}

/// Exact gradient of the discrete total cost (reverse mode of the Heun
/// scheme, replaying the accepted substeps).
pub fn control_gradient(
    model: &dyn Model,
    traj: &Trajectory,
    schedule: &ControlSchedule,
) -> Result<ControlGradient> {
    check_aligned(model, traj, schedule)?;
    if schedule.values.iter().any(|v| !v.is_state_independent()) {
        return Err(Error::Unsupported(
            "control gradients are defined for constant and open-loop values only".into(),
        ));
    }
    let layout = model.layout();
    let dim = layout.dim();
    let m = model.control_dim();
    let mut lam = field::terminal_gradient(model, traj.final_state());
    field::canonicalize_flat(&layout, &mut lam);
    let mut intervals = vec![Vec::new(); traj.grid.steps];
    for k in (0..traj.grid.steps).rev() {
        let u = &schedule.values[k];
        let n = traj.states[k].len();
        let mut gu = vec![DVector::<f64>::zeros(m); n];
        for s in traj.stages[k].iter().rev() {
            let h = s.h;
            let t1 = s.t + h;
            let j0 = field::ensemble_jacobian(model, s.t, &s.start, u);
            let j1 = field::ensemble_jacobian(model, t1, &s.predictor, u);
            let l0 = field::running_gradient(model, s.t, &s.start, u);
            let l1 = field::running_gradient(model, t1, &s.predictor, u);
            let b0 = field::control_derivatives(model, s.t, &s.start, u);
            let b1 = field::control_derivatives(model, t1, &s.predictor, u);
            let a = (j1.tr_mul(&lam) + l1) * (0.5 * h);
            for i in 0..n {
                let li = lam.rows(i * dim, dim);
                let ai = a.rows(i * dim, dim);
                gu[i] += (b0[i].0.tr_mul(&li) + &b0[i].1) * (0.5 * h)
                    + (b1[i].0.tr_mul(&li) + &b1[i].1) * (0.5 * h)
                    + b0[i].0.tr_mul(&ai) * h;
            }
            let next = &lam + (j0.tr_mul(&lam) + &l0) * (0.5 * h) + &a + j0.tr_mul(&a) * h;
            lam = next;
            field::canonicalize_flat(&layout, &mut lam);
        }
        intervals[k] = match u {
            ControlValue::OpenLoop { .. } => {
                gu.iter().map(|g| g.iter().copied().collect()).collect()
            }
            _ => vec![gu
                .iter()
                .fold(DVector::zeros(m), |acc, g| acc + g)
                .iter()
                .copied()
                .collect()],
        };
    }
    Ok(ControlGradient {
        intervals,
        initial: lam.iter().copied().collect(),
    })
}

/// Hamiltonian values of each dictionary entry on each interval, averaged
/// over the two interval end points.
#[derive(Clone, Debug, Serialize)]
pub struct MaximalityScan {
    /// `max_omega H_k(omega) - H_k(u_k)`, clamped at zero.
    pub residual: Vec<f64>,
    /// Lowest dictionary index attaining the maximum on each interval.
    pub argmax: Vec<usize>,
    /// `H_k(u_k)`.
    pub current: Vec<f64>,
}

pub fn maximality_scan(
    model: &dyn Model,
    traj: &Trajectory,
    costates: &CostatePath,
    schedule: &ControlSchedule,
    dictionary: &[ControlValue],
) -> Result<MaximalityScan> {
    if dictionary.is_empty() {
        return invalid("maximality residual needs a non-empty dictionary");
    }
    check_aligned(model, traj, schedule)?;
    if costates.costates.len() != traj.states.len() {
        return invalid("costate path is not aligned with the trajectory");
    }
    let mu0 = &traj.states[0];
    for w in dictionary {
        check_control(model, mu0, w)?;
    }
    check_costates(model, mu0, &costates.costates[0])?;
    let grid = &traj.grid;
    let avg = |k: usize, w: &ControlValue| -> f64 {
        0.5 * (hamiltonian_unchecked(
            model,
            grid.time(k),
            &traj.states[k],
            &costates.costates[k],
            w,
        ) + hamiltonian_unchecked(
            model,
            grid.time(k + 1),
            &traj.states[k + 1],
            &costates.costates[k + 1],
            w,
        ))
    };
    let rows = field::par_map(grid.steps, |k| {
        let cur = avg(k, &schedule.values[k]);
        let mut best = f64::NEG_INFINITY;
        let mut arg = 0;
        for (j, w) in dictionary.iter().enumerate() {
            let h = if *w == schedule.values[k] {
                cur
            } else {
                avg(k, w)
            };
            if h > best {
                best = h;
                arg = j;
            }
        }
        ((best - cur).max(0.0), arg, cur)
    });
    Ok(MaximalityScan {
        residual: rows.iter().map(|r| r.0).collect(),
        argmax: rows.iter().map(|r| r.1).collect(),
        current: rows.iter().map(|r| r.2).collect(),
    })
}

/// Per-interval maximality residual `max_omega H(omega) - H(u) >= 0`.
pub fn maximality_residual(
    model: &dyn Model,
    traj: &Trajectory,
    costates: &CostatePath,
    schedule: &ControlSchedule,
    dictionary: &[ControlValue],
) -> Result<Vec<f64>> {
    Ok(maximality_scan(model, traj, costates, schedule, dictionary)?.residual)
}

/// `sum_i <p_i(t_k), w_i(t_k)>` at each node `k >= from`.
pub fn summed_pairing(
    layout: &Layout,
    costates: &CostatePath,
    tangents: &[Vec<TangentVec>],
    from: usize,
) -> Vec<f64> {
    tangents
        .iter()
        .enumerate()
        .map(|(j, ws)| {
            costates.costates[from + j]
                .iter()
                .zip(ws)
                .map(|(p, w)| pairing(layout, p, w).expect("aligned dimensions"))
                .sum()
        })
        .collect()
}
