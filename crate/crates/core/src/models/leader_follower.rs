//! Two-population leader/follower dynamics with label switching.
//!
//! The label is `lam = (s, 1 - s)` where `s` close to 0 marks a strong
//! leader. Positions follow
//! `v(c) = g(s) (K_ff * mu_F + K_lf * mu_L)(x) + (1 - g(s)) (K_fl * mu_F + K_ll * mu_L)(x) + h(s) u`,
//! with `mu_F = g(s') mu`, `mu_L = (1 - g(s')) mu` and `K * nu (x) = int K(x' - x) dnu(x')`.
//! The label moves by `T(c) = -alpha_F(x) g1(s) + alpha_L(x) (1 - g1(s))` in
//! its first component and the opposite amount in the second, where
//! `alpha_* (x) = int H_*(x' - x) ell_*(s') dmu`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::smooth::{diff, norm2, Gain, GaussianBump, GaussianKernel, Poly, Smoothstep};
use super::Model;
use crate::error::{Error, Result};
use crate::geometry::{Ensemble, Layout, StateC};

/// Weights of the goal, control and terminal terms of the costs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunningWeights {
    pub goal: f64,
    pub control: f64,
    pub control_exponent: f64,
    pub terminal: f64,
}

impl Default for RunningWeights {
    fn default() -> Self {
        Self {
            goal: 1.0,
            control: 0.1,
            control_exponent: 2.0,
            terminal: 1.0,
        }
    }
}

impl RunningWeights {
    pub(crate) fn validate(&self, errors: &mut Vec<String>) {
        for (name, w) in [
            ("goal", self.goal),
            ("control", self.control),
            ("terminal", self.terminal),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                errors.push(format!("weights.{name} must be finite and >= 0, got {w}"));
            }
        }
        if !(self.control_exponent >= 1.0) {
            errors.push(format!(
                "weights.control_exponent must be >= 1, got {}",
                self.control_exponent
            ));
        }
    }

    pub(crate) fn control_cost(&self, u: &DVector<f64>) -> f64 {
        if self.control == 0.0 {
            return 0.0;
        }
        self.control * u.norm().powf(self.control_exponent)
    }

    pub(crate) fn control_cost_grad(&self, u: &DVector<f64>) -> DVector<f64> {
        let r = u.norm();
        if self.control == 0.0 || r == 0.0 {
            return DVector::zeros(u.len());
        }
        u * (self.control * self.control_exponent * r.powf(self.control_exponent - 2.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LeaderFollowerParams {
    pub dim: usize,
    pub kernel_ff: GaussianKernel,
    pub kernel_lf: GaussianKernel,
    pub kernel_fl: GaussianKernel,
    pub kernel_ll: GaussianKernel,
    pub rate_f: GaussianBump,
    pub rate_l: GaussianBump,
    pub ell_f: Poly,
    pub ell_l: Poly,
    pub g: Smoothstep,
    pub g1: Poly,
    pub h: Gain,
    /// Goal position; empty means the origin.
    pub goal: Vec<f64>,
    /// Weight of the leader/follower-barycenter term of the running cost.
    pub cohesion: f64,
    pub weights: RunningWeights,
}

impl Default for LeaderFollowerParams {
    fn default() -> Self {
        Self {
            dim: 2,
            kernel_ff: GaussianKernel {
                amplitude: 0.6,
                width: 1.0,
            },
            kernel_lf: GaussianKernel {
                amplitude: 1.0,
                width: 1.5,
            },
            kernel_fl: GaussianKernel {
                amplitude: 0.3,
                width: 1.0,
            },
            kernel_ll: GaussianKernel {
                amplitude: 0.2,
                width: 1.0,
            },
            rate_f: GaussianBump {
                amplitude: 0.4,
                width: 1.0,
            },
            rate_l: GaussianBump {
                amplitude: 0.4,
                width: 1.0,
            },
            ell_f: Poly::new(vec![1.0, -1.0]),
            ell_l: Poly::identity(),
            g: Smoothstep::default(),
            g1: Poly::identity(),
            h: Gain::default(),
            goal: vec![],
            cohesion: 1.0,
            weights: RunningWeights::default(),
        }
    }
}

impl LeaderFollowerParams {
    /// All violated constraints, not just the first.
    pub fn validate(&self) -> Vec<String> {
        let mut errors = Vec::new();
        if self.dim == 0 {
            errors.push("dim must be >= 1".into());
        }
        if !self.goal.is_empty() && self.goal.len() != self.dim {
            errors.push(format!(
                "goal has {} entries, dim is {}",
                self.goal.len(),
                self.dim
            ));
        }
        let g1_0 = self.g1.eval(0.0);
        let g1_1 = self.g1.eval(1.0);
        if g1_0.abs() > 1e-12 || (g1_1 - 1.0).abs() > 1e-12 {
            errors.push(format!(
                "g1 must satisfy g1(0) = 0 and g1(1) = 1 (switching must keep labels in [0, 1]); got g1(0) = {g1_0}, g1(1) = {g1_1}"
            ));
        }
        for (name, p) in [
            ("g1", &self.g1),
            ("ell_f", &self.ell_f),
            ("ell_l", &self.ell_l),
        ] {
            let (lo, hi) = p.sampled_range(200);
            if lo < -1e-12 || hi > 1.0 + 1e-12 {
                errors.push(format!(
                    "{name} must map [0, 1] into [0, 1]; sampled range [{lo}, {hi}]"
                ));
            }
        }
        for (name, k) in [
            ("kernel_ff", &self.kernel_ff),
            ("kernel_lf", &self.kernel_lf),
            ("kernel_fl", &self.kernel_fl),
            ("kernel_ll", &self.kernel_ll),
        ] {
            if !(k.width > 0.0 && k.amplitude.is_finite()) {
                errors.push(format!("{name} needs width > 0 and a finite amplitude"));
            }
        }
        for (name, b) in [("rate_f", &self.rate_f), ("rate_l", &self.rate_l)] {
            if !(b.width > 0.0 && b.amplitude >= 0.0) {
                errors.push(format!(
                    "{name} needs width > 0 and amplitude >= 0 (switching rates are non-negative)"
                ));
            }
        }
        if !(self.g.margin > 0.0) {
            errors.push("g.margin must be > 0".into());
        }
        match self.h {
            Gain::Cutoff { level, zero_from } => {
                if !(level >= 0.0 && zero_from > 0.0) {
                    errors.push("h cutoff needs level >= 0 and zero_from > 0".into());
                }
            }
            Gain::Constant { value } => {
                if !(value >= 0.0) {
                    errors.push("h must be non-negative".into());
                }
            }
        }
        if !(self.cohesion >= 0.0) {
            errors.push("cohesion must be >= 0".into());
        }
        self.weights.validate(&mut errors);
        errors
    }
}

#[derive(Clone, Debug)]
pub struct LeaderFollowerModel {
    params: LeaderFollowerParams,
    goal: Vec<f64>,
}

struct Aggregates {
    // [K_ff * mu_F, K_lf * mu_L, K_fl * mu_F, K_ll * mu_L]
    conv: [DVector<f64>; 4],
    conv_jac: [DMatrix<f64>; 4],
    alpha_f: f64,
    alpha_l: f64,
    grad_alpha_f: DVector<f64>,
    grad_alpha_l: DVector<f64>,
}

impl LeaderFollowerModel {
    pub fn new(params: LeaderFollowerParams) -> Result<Self> {
        let errors = params.validate();
        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        let goal = if params.goal.is_empty() {
            vec![0.0; params.dim]
        } else {
            params.goal.clone()
        };
        Ok(Self { params, goal })
    }

    pub fn params(&self) -> &LeaderFollowerParams {
        &self.params
    }

    fn kernels(&self) -> [&GaussianKernel; 4] {
        let p = &self.params;
        [&p.kernel_ff, &p.kernel_lf, &p.kernel_fl, &p.kernel_ll]
    }

    fn x<'a>(&self, c: &'a StateC) -> &'a [f64] {
        &c.x[..self.params.dim]
    }

    fn aggregates(&self, mu: &Ensemble, c: &StateC, with_jac: bool) -> Aggregates {
        let d = self.params.dim;
        let n = mu.len() as f64;
        let x = self.x(c);
        let kernels = self.kernels();
        let mut conv: [DVector<f64>; 4] = std::array::from_fn(|_| DVector::zeros(d));
        let mut conv_jac: [DMatrix<f64>; 4] = std::array::from_fn(|_| DMatrix::zeros(d, d));
        let mut alpha_f = 0.0;
        let mut alpha_l = 0.0;
        let mut grad_alpha_f = DVector::zeros(d);
        let mut grad_alpha_l = DVector::zeros(d);
        for cj in &mu.particles {
            let z = diff(self.x(cj), x);
            let gj = self.params.g.eval(cj.lam[0]);
            let weights = [gj, 1.0 - gj, gj, 1.0 - gj];
            for k in 0..4 {
                conv[k] += kernels[k].eval(&z) * (weights[k] / n);
                if with_jac {
                    conv_jac[k] += kernels[k].jacobian(&z) * (weights[k] / n);
                }
            }
            let ef = self.params.ell_f.eval(cj.lam[0]) / n;
            let el = self.params.ell_l.eval(cj.lam[0]) / n;
            alpha_f += self.params.rate_f.eval(&z) * ef;
            alpha_l += self.params.rate_l.eval(&z) * el;
            if with_jac {
                // d/dx of H(x' - x) is -grad H.
                grad_alpha_f -= self.params.rate_f.grad(&z) * ef;
                grad_alpha_l -= self.params.rate_l.grad(&z) * el;
            }
        }
        Aggregates {
            conv,
            conv_jac,
            alpha_f,
            alpha_l,
            grad_alpha_f,
            grad_alpha_l,
        }
    }

    fn follower_barycenter(&self, mu: &Ensemble) -> DVector<f64> {
        let d = self.params.dim;
        let n = mu.len() as f64;
        mu.particles.iter().fold(DVector::zeros(d), |acc, cj| {
            acc + DVector::from_column_slice(self.x(cj)) * (self.params.g.eval(cj.lam[0]) / n)
        })
    }

    fn dim(&self) -> usize {
        self.params.dim + 2
    }
}

impl Model for LeaderFollowerModel {
    fn layout(&self) -> Layout {
        Layout::simplex(self.params.dim, 2)
    }

    fn control_dim(&self) -> usize {
        self.params.dim
    }

    fn velocity(&self, _t: f64, mu: &Ensemble, c: &StateC, u: &DVector<f64>) -> DVector<f64> {
        let d = self.params.dim;
        let s = c.lam[0];
        let a = self.aggregates(mu, c, false);
        let g = self.params.g.eval(s);
        let v = (&a.conv[0] + &a.conv[1]) * g
            + (&a.conv[2] + &a.conv[3]) * (1.0 - g)
            + u * self.params.h.eval(s);
        let g1 = self.params.g1.eval(s);
        let tr = -a.alpha_f * g1 + a.alpha_l * (1.0 - g1);
        let mut out = DVector::zeros(self.dim());
        out.rows_mut(0, d).copy_from(&v);
        out[d] = tr;
        out[d + 1] = -tr;
        out
    }

    fn state_jacobian(&self, _t: f64, mu: &Ensemble, c: &StateC, u: &DVector<f64>) -> DMatrix<f64> {
        let d = self.params.dim;
        let s = c.lam[0];
        let a = self.aggregates(mu, c, true);
        let g = self.params.g.eval(s);
        let dg = self.params.g.deriv(s);
        let mut jac = DMatrix::zeros(self.dim(), self.dim());

        // The kernels are evaluated at x' - x, hence the minus sign.
        let dv_dx = -((&a.conv_jac[0] + &a.conv_jac[1]) * g
            + (&a.conv_jac[2] + &a.conv_jac[3]) * (1.0 - g));
        jac.view_mut((0, 0), (d, d)).copy_from(&dv_dx);
        let dv_ds =
            (&a.conv[0] + &a.conv[1] - &a.conv[2] - &a.conv[3]) * dg + u * self.params.h.deriv(s);
        jac.view_mut((0, d), (d, 1)).copy_from(&dv_ds);

        let g1 = self.params.g1.eval(s);
        let dt_dx = &a.grad_alpha_f * (-g1) + &a.grad_alpha_l * (1.0 - g1);
        let dt_ds = -self.params.g1.deriv(s) * (a.alpha_f + a.alpha_l);
        for j in 0..d {
            jac[(d, j)] = dt_dx[j];
            jac[(d + 1, j)] = -dt_dx[j];
        }
        jac[(d, d)] = dt_ds;
        jac[(d + 1, d)] = -dt_ds;
        jac
    }

    fn control_jacobian(
        &self,
        _t: f64,
        _mu: &Ensemble,
        c: &StateC,
        _u: &DVector<f64>,
    ) -> DMatrix<f64> {
        let d = self.params.dim;
        let mut b = DMatrix::zeros(self.dim(), d);
        let h = self.params.h.eval(c.lam[0]);
        for i in 0..d {
            b[(i, i)] = h;
        }
        b
    }

    fn mu_gradient(
        &self,
        _t: f64,
        _mu: &Ensemble,
        c: &StateC,
        _u: &DVector<f64>,
        c_tilde: &StateC,
    ) -> DMatrix<f64> {
        let d = self.params.dim;
        let p = &self.params;
        let s = c.lam[0];
        let st = c_tilde.lam[0];
        let z = diff(self.x(c_tilde), self.x(c));
        let g = p.g.eval(s);
        let gt = p.g.eval(st);
        let dgt = p.g.deriv(st);
        let [kff, klf, kfl, kll] = self.kernels();

        let mut jac = DMatrix::zeros(self.dim(), self.dim());
        let dx = (kff.jacobian(&z) * gt + klf.jacobian(&z) * (1.0 - gt)) * g
            + (kfl.jacobian(&z) * gt + kll.jacobian(&z) * (1.0 - gt)) * (1.0 - g);
        jac.view_mut((0, 0), (d, d)).copy_from(&dx);
        let ds =
            ((kff.eval(&z) - klf.eval(&z)) * g + (kfl.eval(&z) - kll.eval(&z)) * (1.0 - g)) * dgt;
        jac.view_mut((0, d), (d, 1)).copy_from(&ds);

        let g1 = p.g1.eval(s);
        let t_dx = p.rate_f.grad(&z) * (-g1 * p.ell_f.eval(st))
            + p.rate_l.grad(&z) * ((1.0 - g1) * p.ell_l.eval(st));
        let t_ds = -g1 * p.ell_f.deriv(st) * p.rate_f.eval(&z)
            + (1.0 - g1) * p.ell_l.deriv(st) * p.rate_l.eval(&z);
        for j in 0..d {
            jac[(d, j)] = t_dx[j];
            jac[(d + 1, j)] = -t_dx[j];
        }
        jac[(d, d)] = t_ds;
        jac[(d + 1, d)] = -t_ds;
        jac
    }

    fn running(&self, _t: f64, mu: &Ensemble, c: &StateC, u: &DVector<f64>) -> f64 {
        let w = &self.params.weights;
        let x = self.x(c);
        let mut l = w.goal * norm2(&diff(x, &self.goal)) + w.control_cost(u);
        if self.params.cohesion != 0.0 {
            let mf = self.follower_barycenter(mu);
            let theta = 1.0 - self.params.g.eval(c.lam[0]);
            l += self.params.cohesion * theta * norm2(&diff(x, mf.as_slice()));
        }
        l
    }

    fn running_state_grad(
        &self,
        _t: f64,
        mu: &Ensemble,
        c: &StateC,
        _u: &DVector<f64>,
    ) -> DVector<f64> {
        let d = self.params.dim;
        let w = &self.params.weights;
        let x = self.x(c);
        let mut grad = DVector::zeros(self.dim());
        for (j, r) in diff(x, &self.goal).iter().enumerate() {
            grad[j] = 2.0 * w.goal * r;
        }
        if self.params.cohesion != 0.0 {
            let mf = self.follower_barycenter(mu);
            let r = diff(x, mf.as_slice());
            let theta = 1.0 - self.params.g.eval(c.lam[0]);
            for j in 0..d {
                grad[j] += 2.0 * self.params.cohesion * theta * r[j];
            }
            grad[d] = -self.params.cohesion * self.params.g.deriv(c.lam[0]) * norm2(&r);
        }
        grad
    }

    fn running_control_grad(
        &self,
        _t: f64,
        _mu: &Ensemble,
        _c: &StateC,
        u: &DVector<f64>,
    ) -> DVector<f64> {
        self.params.weights.control_cost_grad(u)
    }

    fn running_mu_grad(
        &self,
        _t: f64,
        mu: &Ensemble,
        c: &StateC,
        _u: &DVector<f64>,
        c_tilde: &StateC,
    ) -> DVector<f64> {
        let d = self.params.dim;
        let mut grad = DVector::zeros(self.dim());
        if self.params.cohesion == 0.0 {
            return grad;
        }
        // Only the follower barycenter int x' dmu_F depends on mu.
        let mf = self.follower_barycenter(mu);
        let r = diff(self.x(c), mf.as_slice());
        let theta = 1.0 - self.params.g.eval(c.lam[0]);
        let coef = -2.0 * self.params.cohesion * theta;
        let gt = self.params.g.eval(c_tilde.lam[0]);
        let dgt = self.params.g.deriv(c_tilde.lam[0]);
        let xt = self.x(c_tilde);
        for j in 0..d {
            grad[j] = coef * r[j] * gt;
        }
        grad[d] = coef * dgt * r.iter().zip(xt).map(|(a, b)| a * b).sum::<f64>();
        grad
    }

    fn terminal(&self, mu: &Ensemble) -> f64 {
        let w = self.params.weights.terminal;
        w * mu
            .particles
            .iter()
            .map(|c| norm2(&diff(self.x(c), &self.goal)))
            .sum::<f64>()
            / mu.len() as f64
    }

    fn terminal_mu_grad(&self, _mu: &Ensemble, c_tilde: &StateC) -> DVector<f64> {
        let w = self.params.weights.terminal;
        let mut grad = DVector::zeros(self.dim());
        for (j, r) in diff(self.x(c_tilde), &self.goal).iter().enumerate() {
            grad[j] = 2.0 * w * r;
        }
        grad
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{self, ControlValue};

    fn ensemble(points: &[(f64, f64, f64)]) -> Ensemble {
        Ensemble::new(
            Layout::simplex(2, 2),
            points
                .iter()
                .map(|&(a, b, s)| StateC::new(vec![a, b], vec![s, 1.0 - s]))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn no_switching_without_rates() {
        let mut p = LeaderFollowerParams::default();
        p.rate_f.amplitude = 0.0;
        p.rate_l.amplitude = 0.0;
        let m = LeaderFollowerModel::new(p).unwrap();
        let mu = ensemble(&[(0.0, 0.0, 0.2), (1.0, -0.5, 0.9)]);
        let v =
            models::velocity(&m, 0.0, &mu, &mu.particles[0], &ControlValue::zero(2), 0).unwrap();
        assert_eq!(v.dlam, vec![0.0, 0.0]);
    }

    #[test]
    fn label_velocity_is_opposite_pair() {
        let m = LeaderFollowerModel::new(LeaderFollowerParams::default()).unwrap();
        let mu = ensemble(&[(0.0, 0.0, 0.2), (1.0, -0.5, 0.9), (0.3, 0.3, 0.5)]);
        for (i, c) in mu.particles.iter().enumerate() {
            let v = models::velocity(&m, 0.0, &mu, c, &ControlValue::constant(vec![0.1, 0.2]), i)
                .unwrap();
            assert_eq!(v.dlam[0], -v.dlam[1]);
            assert!(v.dlam[0] != 0.0);
        }
    }

    #[test]
    fn rejects_bad_g1() {
        let p = LeaderFollowerParams {
            g1: Poly::new(vec![0.0, 0.9]),
            ..Default::default()
        };
        let err = LeaderFollowerModel::new(p).unwrap_err().to_string();
        assert!(err.contains("g1(1) = 1"), "{err}");
    }

    #[test]
    fn constant_ingredients_give_zero_differentials() {
        let zero = GaussianKernel {
            amplitude: 0.0,
            width: 1.0,
        };
        let p = LeaderFollowerParams {
            kernel_ff: zero,
            kernel_lf: zero,
            kernel_fl: zero,
            kernel_ll: zero,
            rate_f: GaussianBump {
                amplitude: 0.0,
                width: 1.0,
            },
            rate_l: GaussianBump {
                amplitude: 0.0,
                width: 1.0,
            },
            h: Gain::Constant { value: 1.0 },
            ..Default::default()
        };
        let m = LeaderFollowerModel::new(p).unwrap();
        let mu = ensemble(&[(0.0, 0.0, 0.2), (1.0, -0.5, 0.9)]);
        let u = ControlValue::constant(vec![0.3, -0.1]);
        let jac = models::c_differential(&m, 0.0, &mu, &mu.particles[0], &u, 0).unwrap();
        assert_eq!(jac.norm(), 0.0);
        let g =
            models::mu_gradient(&m, 0.0, &mu, &mu.particles[0], &u, 0, &mu.particles[1]).unwrap();
        assert_eq!(g.norm(), 0.0);
    }

    #[test]
    fn running_cost_examples() {
        let mut p = LeaderFollowerParams {
            dim: 1,
            goal: vec![0.5],
            cohesion: 0.0,
            ..Default::default()
        };
        p.weights.control = 0.0;
        let m = LeaderFollowerModel::new(p).unwrap();
        let mu = Ensemble::new(
            Layout::simplex(1, 2),
            vec![StateC::new(vec![2.0], vec![0.5, 0.5])],
        )
        .unwrap();
        let l = models::running_cost(&m, 0.0, &mu, &ControlValue::zero(1)).unwrap();
        assert_eq!(l, 1.5 * 1.5);
        let at_goal = Ensemble::new(
            Layout::simplex(1, 2),
            vec![StateC::new(vec![0.5], vec![0.5, 0.5]); 3],
        )
        .unwrap();
        assert_eq!(
            models::running_cost(&m, 0.0, &at_goal, &ControlValue::zero(1)).unwrap(),
            0.0
        );
        assert_eq!(models::final_cost(&m, &at_goal).unwrap(), 0.0);
    }

    #[test]
    fn final_cost_gradient_is_pointwise() {
        let p = LeaderFollowerParams {
            goal: vec![1.0, -1.0],
            ..Default::default()
        };
        let m = LeaderFollowerModel::new(p).unwrap();
        let mu = ensemble(&[(0.0, 0.0, 0.2), (2.0, 1.0, 0.7)]);
        let g = models::final_cost_mu_gradient(&m, &mu, &mu.particles[1]).unwrap();
        assert_eq!(g.px, vec![2.0, 4.0]);
        assert_eq!(g.plam, vec![0.0, 0.0]);
    }
}
