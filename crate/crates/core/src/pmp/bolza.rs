//! Bolza to Mayer reduction: the running cost becomes an extra state
//! coordinate `c_au` with `c_au' = l(t, mu, c, u)` and the terminal cost
//! becomes `phi(mu) + mean_i c_au,i`.
//!
//! `c_au` is stored as position coordinate `d`, so the augmented layout is
//! `[x_0..x_{d-1}, c_au, lam..]` and inner models, which only read `x[..d]`,
//! evaluate unchanged on augmented states.

use nalgebra::{DMatrix, DVector};

use crate::geometry::{Ensemble, Layout, StateC};
use crate::models::Model;

pub struct AugmentedModel<M> {
    inner: M,
}

pub fn bolza_augment<M: Model>(model: M) -> AugmentedModel<M> {
    AugmentedModel { inner: model }
}

/// Appends `c_au = 0` to every particle.
pub fn augment_ensemble(mu: &Ensemble) -> Ensemble {
    let layout = Layout {
        d: mu.layout.d + 1,
        ..mu.layout
    };
    let particles = mu
        .particles
        .iter()
        .map(|c| {
            let mut x = c.x.clone();
            x.push(0.0);
            StateC::new(x, c.lam.clone())
        })
        .collect();
    Ensemble { layout, particles }
}

impl<M: Model> AugmentedModel<M> {
    pub fn inner(&self) -> &M {
        &self.inner
    }

    fn d(&self) -> usize {
        self.inner.layout().d
    }

    /// Inner coordinate index to augmented index.
    fn lift_index(&self, i: usize) -> usize {
        if i < self.d() {
            i
        } else {
            i + 1
        }
    }

    fn lift_vec(&self, v: &DVector<f64>, au: f64) -> DVector<f64> {
        let mut out = DVector::zeros(v.len() + 1);
        for (i, x) in v.iter().enumerate() {
            out[self.lift_index(i)] = *x;
        }
        out[self.d()] = au;
        out
    }

    /// Embeds an inner `rows x cols` block; the `c_au` row is `au_row` and the
    /// `c_au` column (when square) stays zero.
    fn lift_rows(&self, m: &DMatrix<f64>, au_row: &DVector<f64>, square: bool) -> DMatrix<f64> {
        let cols = if square { m.ncols() + 1 } else { m.ncols() };
        let col = |j: usize| if square { self.lift_index(j) } else { j };
        let mut out = DMatrix::zeros(m.nrows() + 1, cols);
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                out[(self.lift_index(i), col(j))] = m[(i, j)];
            }
        }
        for j in 0..m.ncols() {
            out[(self.d(), col(j))] = au_row[j];
        }
        out
    }
}

impl<M: Model> Model for AugmentedModel<M> {
    fn layout(&self) -> Layout {
        let l = self.inner.layout();
        Layout { d: l.d + 1, ..l }
    }

    fn control_dim(&self) -> usize {
        self.inner.control_dim()
    }

    fn velocity(&self, t: f64, mu: &Ensemble, c: &StateC, u: &DVector<f64>) -> DVector<f64> {
        self.lift_vec(
            &self.inner.velocity(t, mu, c, u),
            self.inner.running(t, mu, c, u),
        )
    }

    fn state_jacobian(&self, t: f64, mu: &Ensemble, c: &StateC, u: &DVector<f64>) -> DMatrix<f64> {
        let m = self.inner.state_jacobian(t, mu, c, u);
        let dl = self.inner.running_state_grad(t, mu, c, u);
        self.lift_rows(&m, &dl, true)
    }

    fn control_jacobian(
        &self,
        t: f64,
        mu: &Ensemble,
        c: &StateC,
        u: &DVector<f64>,
    ) -> DMatrix<f64> {
        let b = self.inner.control_jacobian(t, mu, c, u);
        let dl = self.inner.running_control_grad(t, mu, c, u);
        self.lift_rows(&b, &dl, false)
    }

    fn mu_gradient(
        &self,
        t: f64,
        mu: &Ensemble,
        c: &StateC,
        u: &DVector<f64>,
        c_tilde: &StateC,
    ) -> DMatrix<f64> {
        let g = self.inner.mu_gradient(t, mu, c, u, c_tilde);
        let dl = self.inner.running_mu_grad(t, mu, c, u, c_tilde);
        self.lift_rows(&g, &dl, true)
    }

    fn running(&self, _t: f64, _mu: &Ensemble, _c: &StateC, _u: &DVector<f64>) -> f64 {
        0.0
    }

    fn running_state_grad(
        &self,
        _t: f64,
        _mu: &Ensemble,
        _c: &StateC,
        _u: &DVector<f64>,
    ) -> DVector<f64> {
        DVector::zeros(self.layout().dim())
    }

    fn running_control_grad(
        &self,
        _t: f64,
        _mu: &Ensemble,
        _c: &StateC,
        _u: &DVector<f64>,
    ) -> DVector<f64> {
        DVector::zeros(self.control_dim())
    }

    fn running_mu_grad(
        &self,
        _t: f64,
        _mu: &Ensemble,
        _c: &StateC,
        _u: &DVector<f64>,
        _ct: &StateC,
    ) -> DVector<f64> {
        DVector::zeros(self.layout().dim())
    }

    fn terminal(&self, mu: &Ensemble) -> f64 {
        let d = self.d();
        let mean_au = mu.particles.iter().map(|c| c.x[d]).sum::<f64>() / mu.len() as f64;
        self.inner.terminal(mu) + mean_au
    }

    fn terminal_mu_grad(&self, mu: &Ensemble, c_tilde: &StateC) -> DVector<f64> {
        self.lift_vec(&self.inner.terminal_mu_grad(mu, c_tilde), 1.0)
    }
}
