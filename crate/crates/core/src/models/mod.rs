//! Velocity fields `A(t, mu, c, u)` on the convex state space, together with
//! their C-differentials, local Wasserstein differentials and the costs.
//!
//! Matrices act on flat agent coordinates `[x, lam]`. A C-differential
//! `M` maps a displacement `w` of the evaluation point to `M w`; a
//! Wasserstein differential `G(c; c~)` maps a displacement `w` of the mass at
//! `c~` to the first-order change `G w` of the velocity at `c`, before the
//! `1/N` weight of that mass. Cost gradients are coordinate covectors `g`
//! with `df[w] = g . w`.

mod control;
mod leader_follower;
mod replicator;
pub mod smooth;

pub use control::ControlValue;
pub use leader_follower::{LeaderFollowerModel, LeaderFollowerParams, RunningWeights};
pub use replicator::{entropy_operator, ReplicatorModel, ReplicatorParams};

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Result};
use crate::geometry::{CostateVec, Ensemble, Layout, StateC, TangentVec};

pub trait Model: Send + Sync {
    fn layout(&self) -> Layout;

    fn control_dim(&self) -> usize;

    fn velocity(&self, t: f64, mu: &Ensemble, c: &StateC, u: &DVector<f64>) -> DVector<f64>;

    /// C-differential in `c` at a frozen control value.
    fn state_jacobian(&self, t: f64, mu: &Ensemble, c: &StateC, u: &DVector<f64>) -> DMatrix<f64>;

    /// Derivative in the control value, `dim x m`.
    fn control_jacobian(&self, t: f64, mu: &Ensemble, c: &StateC, u: &DVector<f64>)
        -> DMatrix<f64>;

    fn mu_gradient(
        &self,
        t: f64,
        mu: &Ensemble,
        c: &StateC,
        u: &DVector<f64>,
        c_tilde: &StateC,
    ) -> DMatrix<f64>;

    /// Running-cost integrand `l(t, mu, c, u)`; `L(mu, u) = mean_i l(c_i, u(c_i))`.
    fn running(&self, t: f64, mu: &Ensemble, c: &StateC, u: &DVector<f64>) -> f64;

    fn running_state_grad(
        &self,
        t: f64,
        mu: &Ensemble,
        c: &StateC,
        u: &DVector<f64>,
    ) -> DVector<f64>;

    fn running_control_grad(
        &self,
        t: f64,
        mu: &Ensemble,
        c: &StateC,
        u: &DVector<f64>,
    ) -> DVector<f64>;

    /// Wasserstein differential of the integrand at `c` with respect to mass at `c~`.
    fn running_mu_grad(
        &self,
        t: f64,
        mu: &Ensemble,
        c: &StateC,
        u: &DVector<f64>,
        c_tilde: &StateC,
    ) -> DVector<f64>;

    fn terminal(&self, mu: &Ensemble) -> f64;

    /// `grad_mu phi(mu)(c~)` as a coordinate covector.
    fn terminal_mu_grad(&self, mu: &Ensemble, c_tilde: &StateC) -> DVector<f64>;
}

macro_rules! forward_model {
    ($ty:ty) => {
        impl<M: Model + ?Sized> Model for $ty {
            fn layout(&self) -> Layout {
                (**self).layout()
            }
            fn control_dim(&self) -> usize {
                (**self).control_dim()
            }
            fn velocity(
                &self,
                t: f64,
                mu: &Ensemble,
                c: &StateC,
                u: &DVector<f64>,
            ) -> DVector<f64> {
                (**self).velocity(t, mu, c, u)
            }
            fn state_jacobian(
                &self,
                t: f64,
                mu: &Ensemble,
                c: &StateC,
                u: &DVector<f64>,
            ) -> DMatrix<f64> {
                (**self).state_jacobian(t, mu, c, u)
            }
            fn control_jacobian(
                &self,
                t: f64,
                mu: &Ensemble,
                c: &StateC,
                u: &DVector<f64>,
            ) -> DMatrix<f64> {
                (**self).control_jacobian(t, mu, c, u)
            }
            fn mu_gradient(
                &self,
                t: f64,
                mu: &Ensemble,
                c: &StateC,
                u: &DVector<f64>,
                ct: &StateC,
            ) -> DMatrix<f64> {
                (**self).mu_gradient(t, mu, c, u, ct)
            }
            fn running(&self, t: f64, mu: &Ensemble, c: &StateC, u: &DVector<f64>) -> f64 {
                (**self).running(t, mu, c, u)
            }
            fn running_state_grad(
                &self,
                t: f64,
                mu: &Ensemble,
                c: &StateC,
                u: &DVector<f64>,
            ) -> DVector<f64> {
                (**self).running_state_grad(t, mu, c, u)
            }
            fn running_control_grad(
                &self,
                t: f64,
                mu: &Ensemble,
                c: &StateC,
                u: &DVector<f64>,
            ) -> DVector<f64> {
                (**self).running_control_grad(t, mu, c, u)
            }
            fn running_mu_grad(
                &self,
                t: f64,
                mu: &Ensemble,
                c: &StateC,
                u: &DVector<f64>,
                ct: &StateC,
            ) -> DVector<f64> {
                (**self).running_mu_grad(t, mu, c, u, ct)
            }
            fn terminal(&self, mu: &Ensemble) -> f64 {
                (**self).terminal(mu)
            }
            fn terminal_mu_grad(&self, mu: &Ensemble, ct: &StateC) -> DVector<f64> {
                (**self).terminal_mu_grad(mu, ct)
            }
        }
    };
}

forward_model!(Box<M>);
forward_model!(&M);

pub(crate) fn check_inputs(model: &dyn Model, mu: &Ensemble, c: &StateC) -> Result<()> {
    let layout = model.layout();
    if mu.layout != layout {
        return invalid(format!(
            "ensemble layout {:?} does not match model layout {layout:?}",
            mu.layout
        ));
    }
    if c.x.len() != layout.d || c.lam.len() != layout.n {
        return invalid("state dimensions do not match the model");
    }
    Ok(())
}

fn check_control(model: &dyn Model, mu: &Ensemble, u: &ControlValue) -> Result<()> {
    if u.dim() != model.control_dim() {
        return invalid(format!(
            "control has dim {}, model expects {}",
            u.dim(),
            model.control_dim()
        ));
    }
    if let ControlValue::OpenLoop { values } = u {
        if values.len() != mu.len() {
            return invalid("open-loop control does not cover every agent");
        }
    }
    Ok(())
}

// Closed-loop building blocks: the control is evaluated at the agent's own
// state, so its state dependence enters every C-differential.

pub(crate) fn closed_velocity(
    model: &dyn Model,
    t: f64,
    mu: &Ensemble,
    agent: usize,
    c: &StateC,
    u: &ControlValue,
) -> DVector<f64> {
    model.velocity(t, mu, c, &u.eval(agent, c))
}

pub(crate) fn closed_state_jacobian(
    model: &dyn Model,
    t: f64,
    mu: &Ensemble,
    agent: usize,
    c: &StateC,
    u: &ControlValue,
) -> DMatrix<f64> {
    let uv = u.eval(agent, c);
    let mut jac = model.state_jacobian(t, mu, c, &uv);
    if let Some(du) = u.state_jacobian(c, model.layout().dim()) {
        jac += model.control_jacobian(t, mu, c, &uv) * du;
    }
    jac
}

pub(crate) fn closed_running(
    model: &dyn Model,
    t: f64,
    mu: &Ensemble,
    agent: usize,
    c: &StateC,
    u: &ControlValue,
) -> f64 {
    model.running(t, mu, c, &u.eval(agent, c))
}

pub(crate) fn closed_running_grad(
    model: &dyn Model,
    t: f64,
    mu: &Ensemble,
    agent: usize,
    c: &StateC,
    u: &ControlValue,
) -> DVector<f64> {
    let uv = u.eval(agent, c);
    let mut g = model.running_state_grad(t, mu, c, &uv);
    if let Some(du) = u.state_jacobian(c, model.layout().dim()) {
        g += du.transpose() * model.running_control_grad(t, mu, c, &uv);
    }
    g
}

/// Velocity of agent `agent` (state `c`) under `u`.
pub fn velocity(
    model: &dyn Model,
    t: f64,
    mu: &Ensemble,
    c: &StateC,
    u: &ControlValue,
    agent: usize,
) -> Result<TangentVec> {
    check_inputs(model, mu, c)?;
    check_control(model, mu, u)?;
    let layout = model.layout();
    Ok(TangentVec::from_flat(
        &layout,
        closed_velocity(model, t, mu, agent, c, u).as_slice(),
    ))
}

/// C-differential of `c -> A(t, mu, c, u(c))` as a `dim x dim` matrix.
pub fn c_differential(
    model: &dyn Model,
    t: f64,
    mu: &Ensemble,
    c: &StateC,
    u: &ControlValue,
    agent: usize,
) -> Result<DMatrix<f64>> {
    check_inputs(model, mu, c)?;
    check_control(model, mu, u)?;
    Ok(closed_state_jacobian(model, t, mu, agent, c, u))
}

/// Local Wasserstein differential `grad_mu A(t, mu, c, u)(c~)`.
pub fn mu_gradient(
    model: &dyn Model,
    t: f64,
    mu: &Ensemble,
    c: &StateC,
    u: &ControlValue,
    agent: usize,
    c_tilde: &StateC,
) -> Result<DMatrix<f64>> {
    check_inputs(model, mu, c)?;
    check_inputs(model, mu, c_tilde)?;
    check_control(model, mu, u)?;
    Ok(model.mu_gradient(t, mu, c, &u.eval(agent, c), c_tilde))
}

/// `L(t, mu, u) = (1/N) sum_i l(t, mu, c_i, u(c_i))`.
pub fn running_cost(model: &dyn Model, t: f64, mu: &Ensemble, u: &ControlValue) -> Result<f64> {
    check_inputs(model, mu, &mu.particles[0])?;
    check_control(model, mu, u)?;
    let n = mu.len() as f64;
    Ok(mu
        .particles
        .iter()
        .enumerate()
        .map(|(i, c)| closed_running(model, t, mu, i, c, u))
        .sum::<f64>()
        / n)
}

/// Coordinate covector of `grad_mu L(t, mu, u)` at particle `j`.
pub(crate) fn running_mu_covector(
    model: &dyn Model,
    t: f64,
    mu: &Ensemble,
    u: &ControlValue,
    j: usize,
) -> DVector<f64> {
    let cj = &mu.particles[j];
    let mut g = closed_running_grad(model, t, mu, j, cj, u);
    let n = mu.len() as f64;
    for (i, ci) in mu.particles.iter().enumerate() {
        g += model.running_mu_grad(t, mu, ci, &u.eval(i, ci), cj) / n;
    }
    g
}

/// `grad_mu L(t, mu, u)` evaluated at particle `j` of `mu`.
pub fn running_cost_mu_gradient(
    model: &dyn Model,
    t: f64,
    mu: &Ensemble,
    u: &ControlValue,
    j: usize,
) -> Result<CostateVec> {
    check_inputs(model, mu, &mu.particles[0])?;
    check_control(model, mu, u)?;
    if j >= mu.len() {
        return invalid(format!("particle index {j} out of range"));
    }
    let g = running_mu_covector(model, t, mu, u, j);
    Ok(model.layout().covector_to_costate(g.as_slice()))
}

pub fn final_cost(model: &dyn Model, mu: &Ensemble) -> Result<f64> {
    check_inputs(model, mu, &mu.particles[0])?;
    Ok(model.terminal(mu))
}

/// `grad_mu phi(mu)(c~)`.
pub fn final_cost_mu_gradient(
    model: &dyn Model,
    mu: &Ensemble,
    c_tilde: &StateC,
) -> Result<CostateVec> {
    check_inputs(model, mu, c_tilde)?;
    let g = model.terminal_mu_grad(mu, c_tilde);
    Ok(model.layout().covector_to_costate(g.as_slice()))
}
