//! Ensemble-level assembly: the `N`-particle vector field, its Jacobian and
//! the gradients of the ensemble costs, all on flat coordinates
//! `[c_0, ..., c_{N-1}]`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::geometry::Ensemble;
use crate::models::{self, ControlValue, Model};

/// Below this many particles the per-particle work runs serially.
const PARALLEL_MIN: usize = 32;

pub(crate) fn par_map<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    if n >= PARALLEL_MIN {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

/// `F_i = A(t, mu, c_i, u(c_i))`.
pub(crate) fn velocities(
    model: &dyn Model,
    t: f64,
    mu: &Ensemble,
    u: &ControlValue,
) -> Vec<DVector<f64>> {
    par_map(mu.len(), |i| {
        models::closed_velocity(model, t, mu, i, &mu.particles[i], u)
    })
}

/// Closed-loop `D_c A` at every particle.
pub(crate) fn diag_jacobians(
    model: &dyn Model,
    t: f64,
    mu: &Ensemble,
    u: &ControlValue,
) -> Vec<DMatrix<f64>> {
    par_map(mu.len(), |i| {
        models::closed_state_jacobian(model, t, mu, i, &mu.particles[i], u)
    })
}

/// Blocks `(1/N) grad_mu A(c_i; c_j)` of the mean-field coupling.
pub(crate) fn coupling_blocks(
    model: &dyn Model,
    t: f64,
    mu: &Ensemble,
    u: &ControlValue,
) -> Vec<Vec<DMatrix<f64>>> {
    let n = mu.len();
    par_map(n, |i| {
        let ci = &mu.particles[i];
        let ui = u.eval(i, ci);
        mu.particles
            .iter()
            .map(|cj| model.mu_gradient(t, mu, ci, &ui, cj) / n as f64)
            .collect()
    })
}

/// Full Jacobian of `C -> [F_i(C)]`: block-diagonal `D_c A` plus the coupling.
pub(crate) fn ensemble_jacobian(
    model: &dyn Model,
    t: f64,
    mu: &Ensemble,
    u: &ControlValue,
) -> DMatrix<f64> {
    let dim = mu.layout.dim();
    let n = mu.len();
    let diag = diag_jacobians(model, t, mu, u);
    let coupling = coupling_blocks(model, t, mu, u);
    let mut jac = DMatrix::zeros(n * dim, n * dim);
    for i in 0..n {
        for j in 0..n {
            let mut block = jac.view_mut((i * dim, j * dim), (dim, dim));
            block += &coupling[i][j];
            if i == j {
                block += &diag[i];
            }
        }
    }
    jac
}

/// `L(t, mu, u) = mean_i l(c_i, u(c_i))`.
pub(crate) fn running_value(model: &dyn Model, t: f64, mu: &Ensemble, u: &ControlValue) -> f64 {
    let n = mu.len();
    let terms = par_map(n, |i| {
        models::closed_running(model, t, mu, i, &mu.particles[i], u)
    });
    terms.iter().sum::<f64>() / n as f64
}

/// `dL/dC_j = (1/N) grad_mu L(c_j)` as a flat coordinate covector.
pub(crate) fn running_gradient(
    model: &dyn Model,
    t: f64,
    mu: &Ensemble,
    u: &ControlValue,
) -> DVector<f64> {
    let n = mu.len();
    let parts = par_map(n, |j| {
        models::running_mu_covector(model, t, mu, u, j) / n as f64
    });
    stack(&parts)
}

/// `dPhi/dC_j = (1/N) grad_mu phi(c_j)`.
pub(crate) fn terminal_gradient(model: &dyn Model, mu: &Ensemble) -> DVector<f64> {
    let n = mu.len() as f64;
    let parts: Vec<DVector<f64>> = mu
        .particles
        .iter()
        .map(|c| model.terminal_mu_grad(mu, c) / n)
        .collect();
    stack(&parts)
}

/// Per-particle control derivatives `(dF_i/du_i, dL/du_i)` at a frozen value.
pub(crate) fn control_derivatives(
    model: &dyn Model,
    t: f64,
    mu: &Ensemble,
    u: &ControlValue,
) -> Vec<(DMatrix<f64>, DVector<f64>)> {
    let n = mu.len();
    par_map(n, |i| {
        let ci = &mu.particles[i];
        let ui = u.eval(i, ci);
        (
            model.control_jacobian(t, mu, ci, &ui),
            model.running_control_grad(t, mu, ci, &ui) / n as f64,
        )
    })
}

pub(crate) fn stack(parts: &[DVector<f64>]) -> DVector<f64> {
    let len = parts.iter().map(|p| p.len()).sum();
    DVector::from_iterator(len, parts.iter().flat_map(|p| p.iter().copied()))
}

/// Removes the constant from every particle's label block of a flat covector.
pub(crate) fn canonicalize_flat(layout: &crate::geometry::Layout, v: &mut DVector<f64>) {
    let dim = layout.dim();
    for chunk in v.as_mut_slice().chunks_mut(dim) {
        layout.project_tangent(chunk);
    }
}
