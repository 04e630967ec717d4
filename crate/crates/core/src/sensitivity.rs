//! Linearisations along a solved trajectory: the frozen-measure flow of a
//! test particle, its C-differential, and the mean-field linearised system
//! `v' = D_c A[v] + mean_j grad_mu A(c_j)[f_j + v_j]`.
//!
//! All linear solves use the discrete tangent of the forward Heun scheme:
//! coefficients are taken at the stored stage points, so the results are
//! exact derivatives of the discrete flows.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dynamics::{ControlSchedule, Substep, Trajectory, STAGE_TOL};
use crate::error::{invalid, Result};
use crate::field;
use crate::geometry::{in_state_space, Ensemble, Layout, StateC, TangentVec};
use crate::models::{self, ControlValue, Model};

fn check_aligned(traj: &Trajectory, schedule: &ControlSchedule) -> Result<()> {
    if schedule.len() != traj.grid.steps || traj.stages.len() != traj.grid.steps {
        return invalid("schedule and trajectory are not aligned");
    }
    Ok(())
}

fn substeps_from(traj: &Trajectory, from: usize) -> impl Iterator<Item = (usize, &Substep)> {
    traj.stages
        .iter()
        .enumerate()
        .skip(from)
        .flat_map(|(k, st)| st.iter().map(move |s| (k, s)))
}

/// Flow of a test particle through the frozen measure path of `traj`,
/// started at node `from`. States at nodes `from..=K`.
pub fn flow_map(
    model: &dyn Model,
    traj: &Trajectory,
    schedule: &ControlSchedule,
    agent: usize,
    c0: &StateC,
    from: usize,
) -> Result<Vec<StateC>> {
    check_aligned(traj, schedule)?;
    let layout = model.layout();
    let mut path = vec![c0.clone()];
    let mut c = c0.clone();
    for k in from..traj.grid.steps {
        let u = &schedule.values[k];
        for s in &traj.stages[k] {
            let f0 = models::closed_velocity(model, s.t, &s.start, agent, &c, u);
            let pred = StateC::from_flat(&layout, (c.to_flat() + &f0 * s.h).as_slice());
            let f1 = models::closed_velocity(model, s.t + s.h, &s.predictor, agent, &pred, u);
            let avg = (f0 + f1) * 0.5;
            let next = StateC::from_flat(&layout, (c.to_flat() + avg * s.h).as_slice());
            if !in_state_space(&layout, &next, 1e-10) {
                return invalid(format!(
                    "frozen flow leaves the state space at t = {}",
                    s.t + s.h
                ));
            }
            c = next;
        }
        path.push(c.clone());
    }
    Ok(path)
}

fn project(layout: &Layout, v: &mut DVector<f64>) {
    layout.project_tangent(v.as_mut_slice());
}

/// `D_c Phi_{(t_from, t)}[f0]` for particle `i`: the linear ODE `z' = D_c A z`
/// along the particle's own path, at nodes `from..=K`.
pub fn flow_differential(
    model: &dyn Model,
    traj: &Trajectory,
    schedule: &ControlSchedule,
    i: usize,
    f0: &TangentVec,
    from: usize,
) -> Result<Vec<TangentVec>> {
    check_aligned(traj, schedule)?;
    if i >= traj.states[0].len() {
        return invalid(format!("particle index {i} out of range"));
    }
    if from > traj.grid.steps {
        return invalid("start node out of range");
    }
    let layout = model.layout();
    let mut z = f0.to_flat();
    let mut path = vec![f0.clone()];
    for k in from..traj.grid.steps {
        let u = &schedule.values[k];
        for s in &traj.stages[k] {
            let m0 =
                models::closed_state_jacobian(model, s.t, &s.start, i, &s.start.particles[i], u);
            let m1 = models::closed_state_jacobian(
                model,
                s.t + s.h,
                &s.predictor,
                i,
                &s.predictor.particles[i],
                u,
            );
            let k0 = &m0 * &z;
            let mut zp = &z + &k0 * s.h;
            project(&layout, &mut zp);
            z += (k0 + &m1 * zp) * (0.5 * s.h);
            project(&layout, &mut z);
        }
        path.push(TangentVec::from_flat(&layout, z.as_slice()));
    }
    Ok(path)
}

/// Largest Frobenius norm of `D_c A` over the stage points of particle `i`.
pub fn path_lipschitz(
    model: &dyn Model,
    traj: &Trajectory,
    schedule: &ControlSchedule,
    i: usize,
) -> f64 {
    substeps_from(traj, 0)
        .flat_map(|(k, s)| {
            let u = &schedule.values[k];
            [
                models::closed_state_jacobian(model, s.t, &s.start, i, &s.start.particles[i], u)
                    .norm(),
                models::closed_state_jacobian(
                    model,
                    s.t + s.h,
                    &s.predictor,
                    i,
                    &s.predictor.particles[i],
                    u,
                )
                .norm(),
            ]
        })
        .fold(0.0, f64::max)
}

/// Solution of the linearised mean-field system.
#[derive(Clone, Debug, Serialize)]
pub struct LinearizedState {
    /// `v(t_k, c_i)` at nodes `from..=K`, with `v(t_from) = 0`.
    pub v: Vec<Vec<TangentVec>>,
    /// Frozen-measure part `f(t_k, c_i) = D_c Phi[F0_i]`.
    pub f: Vec<Vec<TangentVec>>,
}

impl LinearizedState {
    /// Total first-order perturbation `f + v` at node `k`.
    pub fn total(&self, k: usize) -> Vec<TangentVec> {
        self.v[k]
            .iter()
            .zip(&self.f[k])
            .map(|(v, f)| TangentVec {
                dx: v.dx.iter().zip(&f.dx).map(|(a, b)| a + b).collect(),
                dlam: v.dlam.iter().zip(&f.dlam).map(|(a, b)| a + b).collect(),
            })
            .collect()
    }
}

struct StageCoefficients {
    diag: Vec<DMatrix<f64>>,
    coupling: Vec<Vec<DMatrix<f64>>>,
}

impl StageCoefficients {
    fn new(model: &dyn Model, t: f64, mu: &Ensemble, u: &ControlValue) -> Self {
        Self {
            diag: field::diag_jacobians(model, t, mu, u),
            coupling: field::coupling_blocks(model, t, mu, u),
        }
    }

    fn diag_apply(&self, z: &[DVector<f64>]) -> Vec<DVector<f64>> {
        self.diag.iter().zip(z).map(|(m, v)| m * v).collect()
    }

    fn coupling_apply(&self, z: &[DVector<f64>]) -> Vec<DVector<f64>> {
        self.coupling
            .iter()
            .map(|row| {
                row.iter()
                    .zip(z)
                    .fold(DVector::zeros(z[0].len()), |acc, (g, v)| acc + g * v)
            })
            .collect()
    }
}

fn axpy(layout: &Layout, a: &[DVector<f64>], b: &[DVector<f64>], s: f64) -> Vec<DVector<f64>> {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let mut r = x + y * s;
            project(layout, &mut r);
            r
        })
        .collect()
}

fn add(a: &[DVector<f64>], b: &[DVector<f64>]) -> Vec<DVector<f64>> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn to_tangents(layout: &Layout, z: &[DVector<f64>]) -> Vec<TangentVec> {
    z.iter()
        .map(|v| TangentVec::from_flat(layout, v.as_slice()))
        .collect()
}

/// Solves the linearised system for the initial perturbation field
/// `F0_i` (one tangent per particle), from node `from`.
pub fn solve_linearized(
    model: &dyn Model,
    traj: &Trajectory,
    schedule: &ControlSchedule,
    f0: &[TangentVec],
    from: usize,
) -> Result<LinearizedState> {
    check_aligned(traj, schedule)?;
    let n = traj.states[0].len();
    if f0.len() != n {
        return invalid(format!("{} initial tangents for {n} particles", f0.len()));
    }
    if from > traj.grid.steps {
        return invalid("start node out of range");
    }
    let layout = model.layout();
    let dim = layout.dim();
    if f0
        .iter()
        .any(|t| t.dx.len() != layout.d || t.dlam.len() != layout.n)
    {
        return invalid("initial tangent has the wrong dimensions");
    }
    let mut f: Vec<DVector<f64>> = f0.iter().map(TangentVec::to_flat).collect();
    let mut v: Vec<DVector<f64>> = vec![DVector::zeros(dim); n];
    let mut out = LinearizedState {
        v: vec![to_tangents(&layout, &v)],
        f: vec![to_tangents(&layout, &f)],
    };
    for k in from..traj.grid.steps {
        let u = &schedule.values[k];
        for s in &traj.stages[k] {
            let c0 = StageCoefficients::new(model, s.t, &s.start, u);
            let c1 = StageCoefficients::new(model, s.t + s.h, &s.predictor, u);
            let kf0 = c0.diag_apply(&f);
            let kv0 = add(&c0.diag_apply(&v), &c0.coupling_apply(&add(&f, &v)));
            let fp = axpy(&layout, &f, &kf0, s.h);
            let vp = axpy(&layout, &v, &kv0, s.h);
            let kf1 = c1.diag_apply(&fp);
            let kv1 = add(&c1.diag_apply(&vp), &c1.coupling_apply(&add(&fp, &vp)));
            f = axpy(&layout, &f, &add(&kf0, &kf1), 0.5 * s.h);
            v = axpy(&layout, &v, &add(&kv0, &kv1), 0.5 * s.h);
        }
        out.v.push(to_tangents(&layout, &v));
        out.f.push(to_tangents(&layout, &f));
    }
    Ok(out)
}

/// Total perturbation `w' = J w` of the whole ensemble from node `from`,
/// with `J` the full ensemble Jacobian.
pub fn propagate_ensemble(
    model: &dyn Model,
    traj: &Trajectory,
    schedule: &ControlSchedule,
    w0: &[TangentVec],
    from: usize,
) -> Result<Vec<Vec<TangentVec>>> {
    let lin = solve_linearized(model, traj, schedule, w0, from)?;
    Ok((0..lin.v.len()).map(|k| lin.total(k)).collect())
}

/// `d/de phi(mu_e(T))` predicted by the linearisation: `mean_i grad_mu phi(c_i(T)) . (f + v)_i(T)`.
pub fn chain_rule_derivative(model: &dyn Model, traj: &Trajectory, lin: &LinearizedState) -> f64 {
    let mu_t = traj.final_state();
    let total = lin.total(lin.v.len() - 1);
    let n = mu_t.len() as f64;
    mu_t.particles
        .iter()
        .zip(&total)
        .map(|(c, w)| model.terminal_mu_grad(mu_t, c).dot(&w.to_flat()))
        .sum::<f64>()
        / n
}

/// `mu0` transported by `c -> c + e F0(c)`; fails if a particle leaves `C`.
pub fn perturbed_ensemble(mu0: &Ensemble, f0: &[TangentVec], e: f64) -> Result<Ensemble> {
    let particles: Vec<StateC> = mu0
        .particles
        .iter()
        .zip(f0)
        .map(|(c, f)| c.displaced(f, e))
        .collect();
    let out = Ensemble {
        layout: mu0.layout,
        particles,
    };
    out.validate(STAGE_TOL)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::solve_state;
    use crate::scenarios;

    fn setup() -> (scenarios::Scenario, Trajectory) {
        let (sc, _) = scenarios::needle(50);
        let traj = solve_state(sc.model.as_ref(), &sc.grid, &sc.mu0, &sc.schedule).unwrap();
        (sc, traj)
    }

    #[test]
    fn frozen_flow_reproduces_particles() {
        let (sc, traj) = setup();
        for i in [0, 3, 7] {
            let path = flow_map(
                sc.model.as_ref(),
                &traj,
                &sc.schedule,
                i,
                &sc.mu0.particles[i],
                0,
            )
            .unwrap();
            assert_eq!(path, traj.particle_path(i));
        }
    }

    #[test]
    fn zero_initial_tangent_stays_zero() {
        let (sc, traj) = setup();
        let layout = sc.model.layout();
        let path = flow_differential(
            sc.model.as_ref(),
            &traj,
            &sc.schedule,
            2,
            &TangentVec::zeros(&layout),
            0,
        )
        .unwrap();
        assert!(path.iter().all(|z| z.to_flat().norm() == 0.0));
    }

    #[test]
    fn flow_differential_obeys_gronwall() {
        let (sc, traj) = setup();
        let lip = path_lipschitz(sc.model.as_ref(), &traj, &sc.schedule, 1);
        let f0 = TangentVec {
            dx: vec![0.3, -0.4],
            dlam: vec![0.1, -0.1],
        };
        let path = flow_differential(sc.model.as_ref(), &traj, &sc.schedule, 1, &f0, 0).unwrap();
        for (k, z) in path.iter().enumerate() {
            let bound = (lip * (traj.grid.time(k) - traj.grid.t0)).exp() * f0.to_flat().norm();
            assert!(z.to_flat().norm() <= bound * (1.0 + 1e-12));
        }
    }

    #[test]
    fn linearized_starts_at_zero_and_stays_tangent() {
        let (sc, traj) = setup();
        let f0: Vec<TangentVec> = (0..8)
            .map(|i| TangentVec {
                dx: vec![0.1 * i as f64, -0.2],
                dlam: vec![0.05, -0.05],
            })
            .collect();
        let lin = solve_linearized(sc.model.as_ref(), &traj, &sc.schedule, &f0, 0).unwrap();
        assert!(lin.v[0].iter().all(|v| v.to_flat().norm() == 0.0));
        for vk in &lin.v {
            for v in vk {
                assert!(v.label_sum().abs() <= 1e-10);
            }
        }
    }
}
