//! Forward-backward sweep over a finite control dictionary.
//!
//! Each iteration solves the state, the costates and scans the dictionary on
//! every interval. Intervals whose residual exceeds `tol (1 + |H|)` are
//! candidates; the `damping` fraction of them with the largest residuals
//! (at least one) is switched to the maximiser. A candidate schedule is
//! accepted only if the total cost strictly decreases; otherwise the number
//! of switches is halved, and as a last resort single switches are tried in
//! order of decreasing residual.

use serde::{Deserialize, Serialize};

use super::{maximality_scan, mayer_terminal, solve_adjoint, CostatePath, MaximalityScan};
use crate::dynamics::{solve_state, ControlSchedule, TimeGrid, Trajectory};
use crate::error::{invalid, Result};
use crate::geometry::Ensemble;
use crate::models::{ControlValue, Model};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepOptions {
    /// Fraction of violating intervals switched per iteration, in `(0, 1]`.
    pub damping: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            damping: 0.5,
            max_iters: 100,
            tol: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub iterations: usize,
    /// Total cost of every accepted schedule, starting with the initial one.
    pub cost_history: Vec<f64>,
    /// Largest scaled residual `max_k r_k / (1 + |H_k|)` at every iteration.
    pub residual_history: Vec<f64>,
    /// Fraction of violating intervals actually switched at each accepted update.
    pub damping_used: Vec<f64>,
    pub converged: bool,
    /// Why the sweep stopped.
    pub status: String,
}

pub struct SweepOutcome {
    pub indices: Vec<usize>,
    pub schedule: ControlSchedule,
    pub trajectory: Trajectory,
    pub costates: CostatePath,
    pub scan: MaximalityScan,
    pub report: SweepReport,
}

fn scaled_residuals(scan: &MaximalityScan) -> Vec<f64> {
    scan.residual
        .iter()
        .zip(&scan.current)
        .map(|(r, h)| r / (1.0 + h.abs()))
        .collect()
}

pub fn forward_backward_sweep(
    model: &dyn Model,
    grid: &TimeGrid,
    mu0: &Ensemble,
    init: &[usize],
    dictionary: &[ControlValue],
    options: &SweepOptions,
) -> Result<SweepOutcome> {
    if dictionary.is_empty() {
        return invalid("the control dictionary is empty");
    }
    if !(options.damping > 0.0 && options.damping <= 1.0) {
        return invalid(format!(
            "damping must be in (0, 1], got {}",
            options.damping
        ));
    }
    if !(options.tol > 0.0) || options.max_iters == 0 {
        return invalid("sweep needs tol > 0 and max_iters >= 1");
    }
    if init.len() != grid.steps || init.iter().any(|&i| i >= dictionary.len()) {
        return invalid("initial schedule must give one dictionary index per interval");
    }

    let mut indices = init.to_vec();
    let mut schedule = ControlSchedule::from_dictionary(dictionary, &indices);
    let mut traj = solve_state(model, grid, mu0, &schedule)?;
    let mut cost = traj.total_cost(model);
    let mut report = SweepReport {
        iterations: 0,
        cost_history: vec![cost],
        residual_history: Vec::new(),
        damping_used: Vec::new(),
        converged: false,
        status: "max_iters exhausted".into(),
    };

    loop {
        let costates = solve_adjoint(
            model,
            &traj,
            &schedule,
            &mayer_terminal(model, traj.final_state()),
        )?;
        let scan = maximality_scan(model, &traj, &costates, &schedule, dictionary)?;
        report.iterations += 1;
        let scaled = scaled_residuals(&scan);
        report
            .residual_history
            .push(scaled.iter().copied().fold(0.0, f64::max));

        let mut violating: Vec<usize> = (0..grid.steps)
            .filter(|&k| scaled[k] > options.tol)
            .collect();
        if violating.is_empty() {
            report.converged = true;
            report.status = "maximality condition met on every interval".into();
            return Ok(SweepOutcome {
                indices,
                schedule,
                trajectory: traj,
                costates,
                scan,
                report,
            });
        }
        if report.iterations >= options.max_iters {
            return Ok(SweepOutcome {
                indices,
                schedule,
                trajectory: traj,
                costates,
                scan,
                report,
            });
        }
        violating.sort_by(|&a, &b| {
            scan.residual[b]
                .total_cmp(&scan.residual[a])
                .then(a.cmp(&b))
        });

        let try_switch =
            |set: &[usize]| -> Result<Option<(Vec<usize>, ControlSchedule, Trajectory, f64)>> {
                let mut cand = indices.clone();
                for &k in set {
                    cand[k] = scan.argmax[k];
                }
                let sched = ControlSchedule::from_dictionary(dictionary, &cand);
                // A candidate that cannot be integrated is treated as rejected.
                let Ok(tr) = solve_state(model, grid, mu0, &sched) else {
                    return Ok(None);
                };
                let c = tr.total_cost(model);
                Ok((c < cost).then_some((cand, sched, tr, c)))
            };

        let mut count = ((options.damping * violating.len() as f64).ceil() as usize).max(1);
        let mut accepted = None;
        loop {
            if let Some(found) = try_switch(&violating[..count])? {
                accepted = Some((found, count));
                break;
            }
            if count == 1 {
                break;
            }
            count /= 2;
        }
        if accepted.is_none() {
            for &k in violating.iter().skip(1) {
                if let Some(found) = try_switch(&[k])? {
                    accepted = Some((found, 1));
                    break;
                }
            }
        }
        let Some(((cand, sched, tr, c), used)) = accepted else {
            report.status = "no switch to the Hamiltonian maximiser decreases the cost".into();
            return Ok(SweepOutcome {
                indices,
                schedule,
                trajectory: traj,
                costates,
                scan,
                report,
            });
        };
        indices = cand;
        schedule = sched;
        traj = tr;
        cost = c;
        report.cost_history.push(cost);
        report
            .damping_used
            .push(used as f64 / violating.len() as f64);
    }
}
