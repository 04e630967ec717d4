//! Replicator dynamics with entropy regularisation on an `n`-point strategy
//! grid `v_k = (k + 1/2) / n` in `[0, 1]` with uniform weights.
//!
//! `A(c) = (int K(x' - x) dmu + u, T(c) + eps S(l))` with
//! `T(c)_k = (F_k - mean_m F_m l_m) l_k`, `F_k = int J(x, v_k, x') dmu(x')`,
//! `S(l)_k = (mean_m l_m log l_m - log l_k) l_k` and the payoff
//! `J(x, v, x') = b(v) exp(-|x - x'|^2 / (2 s^2))`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::leader_follower::RunningWeights;
use super::smooth::{diff, norm2, GaussianKernel, Poly};
use super::Model;
use crate::error::{invalid, Error, Result};
use crate::geometry::{Ensemble, Layout, StateC};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplicatorParams {
    pub dim: usize,
    /// Number of grid strategies.
    pub strategies: usize,
    pub kernel: GaussianKernel,
    /// Strategy profile `b(v)` of the payoff.
    pub payoff_profile: Poly,
    pub payoff_width: f64,
    /// Entropy weight `eps`.
    pub entropy: f64,
    pub lower: f64,
    pub upper: f64,
    pub goal: Vec<f64>,
    pub weights: RunningWeights,
}

impl Default for ReplicatorParams {
    fn default() -> Self {
        Self {
            dim: 1,
            strategies: 8,
            kernel: GaussianKernel {
                amplitude: 0.5,
                width: 1.0,
            },
            payoff_profile: Poly::new(vec![1.0, -2.0]),
            payoff_width: 1.0,
            entropy: 0.5,
            lower: 1e-3,
            upper: 50.0,
            goal: vec![],
            weights: RunningWeights::default(),
        }
    }
}

impl ReplicatorParams {
    pub fn validate(&self) -> Vec<String> {
        let mut errors = Vec::new();
        if self.dim == 0 {
            errors.push("dim must be >= 1".into());
        }
        if self.strategies < 2 {
            errors.push("strategies must be >= 2".into());
        }
        if !self.goal.is_empty() && self.goal.len() != self.dim {
            errors.push(format!(
                "goal has {} entries, dim is {}",
                self.goal.len(),
                self.dim
            ));
        }
        if !(self.kernel.width > 0.0 && self.payoff_width > 0.0) {
            errors.push("kernel and payoff widths must be > 0".into());
        }
        if !(self.entropy > 0.0) {
            errors.push("entropy weight must be > 0".into());
        }
        if !(self.lower > 0.0 && self.lower <= 1.0 && self.upper >= 1.0 && self.lower < self.upper)
        {
            errors.push(format!(
                "density bounds need 0 < lower <= 1 <= upper, got [{}, {}]",
                self.lower, self.upper
            ));
        }
        self.weights.validate(&mut errors);
        errors
    }
}

#[derive(Clone, Debug)]
pub struct ReplicatorModel {
    params: ReplicatorParams,
    goal: Vec<f64>,
    profile: Vec<f64>,
}

/// `S(l)_k = (mean_m l_m log l_m - log l_k) l_k`.
pub fn entropy_operator(lam: &[f64]) -> Result<Vec<f64>> {
    if lam.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
        return invalid("entropy operator needs strictly positive densities");
    }
    let n = lam.len() as f64;
    let mean = lam.iter().map(|l| l * l.ln()).sum::<f64>() / n;
    Ok(lam.iter().map(|l| (mean - l.ln()) * l).collect())
}

impl ReplicatorModel {
    pub fn new(params: ReplicatorParams) -> Result<Self> {
        let errors = params.validate();
        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        let n = params.strategies;
        let profile = (0..n)
            .map(|k| params.payoff_profile.eval((k as f64 + 0.5) / n as f64))
            .collect();
        let goal = if params.goal.is_empty() {
            vec![0.0; params.dim]
        } else {
            params.goal.clone()
        };
        Ok(Self {
            params,
            goal,
            profile,
        })
    }

    pub fn params(&self) -> &ReplicatorParams {
        &self.params
    }

    fn x<'a>(&self, c: &'a StateC) -> &'a [f64] {
        &c.x[..self.params.dim]
    }

    fn envelope(&self, x: &[f64], xp: &[f64]) -> f64 {
        let s = self.params.payoff_width;
        (-norm2(&diff(x, xp)) / (2.0 * s * s)).exp()
    }

    /// Mean payoff envelope `E(x) = mean_j exp(...)` and its x-gradient.
    fn payoff_field(&self, mu: &Ensemble, x: &[f64]) -> (f64, DVector<f64>) {
        let n = mu.len() as f64;
        let s2 = self.params.payoff_width * self.params.payoff_width;
        let mut e = 0.0;
        let mut de = DVector::zeros(x.len());
        for cj in &mu.particles {
            let xj = self.x(cj);
            let ej = self.envelope(x, xj) / n;
            e += ej;
            for (i, r) in diff(x, xj).iter().enumerate() {
                de[i] -= r / s2 * ej;
            }
        }
        (e, de)
    }

    fn mean_profile(&self, lam: &[f64]) -> f64 {
        self.profile
            .iter()
            .zip(lam)
            .map(|(b, l)| b * l)
            .sum::<f64>()
            / lam.len() as f64
    }
}

impl Model for ReplicatorModel {
    fn layout(&self) -> Layout {
        Layout::density(
            self.params.dim,
            self.params.strategies,
            self.params.lower,
            self.params.upper,
        )
    }

    fn control_dim(&self) -> usize {
        self.params.dim
    }

    fn velocity(&self, _t: f64, mu: &Ensemble, c: &StateC, u: &DVector<f64>) -> DVector<f64> {
        let d = self.params.dim;
        let n = mu.len() as f64;
        let x = self.x(c);
        let mut v = u.clone();
        for cj in &mu.particles {
            v += self.params.kernel.eval(&diff(self.x(cj), x)) / n;
        }
        let (e, _) = self.payoff_field(mu, x);
        let bbar = self.mean_profile(&c.lam);
        let entropy = entropy_operator(&c.lam).unwrap_or_else(|_| vec![f64::NAN; c.lam.len()]);
        let mut out = DVector::zeros(self.layout().dim());
        out.rows_mut(0, d).copy_from(&v);
        for (k, l) in c.lam.iter().enumerate() {
            out[d + k] = e * (self.profile[k] - bbar) * l + self.params.entropy * entropy[k];
        }
        out
    }

    fn state_jacobian(
        &self,
        _t: f64,
        mu: &Ensemble,
        c: &StateC,
        _u: &DVector<f64>,
    ) -> DMatrix<f64> {
        let d = self.params.dim;
        let ns = self.params.strategies;
        let n = mu.len() as f64;
        let x = self.x(c);
        let lam = &c.lam;
        let mut jac = DMatrix::zeros(d + ns, d + ns);
        let mut dv = DMatrix::zeros(d, d);
        for cj in &mu.particles {
            dv -= self.params.kernel.jacobian(&diff(self.x(cj), x)) / n;
        }
        jac.view_mut((0, 0), (d, d)).copy_from(&dv);

        let (e, de) = self.payoff_field(mu, x);
        let bbar = self.mean_profile(lam);
        let mean_ll = lam.iter().map(|l| l * l.ln()).sum::<f64>() / ns as f64;
        let eps = self.params.entropy;
        for k in 0..ns {
            for j in 0..d {
                jac[(d + k, j)] = (self.profile[k] - bbar) * lam[k] * de[j];
            }
            for m in 0..ns {
                let delta = if k == m { 1.0 } else { 0.0 };
                let replicator =
                    delta * e * (self.profile[k] - bbar) - lam[k] * e * self.profile[m] / ns as f64;
                let entropy = delta * (mean_ll - lam[k].ln() - 1.0)
                    + lam[k] * (1.0 + lam[m].ln()) / ns as f64;
                jac[(d + k, d + m)] = replicator + eps * entropy;
            }
        }
        jac
    }

    fn control_jacobian(
        &self,
        _t: f64,
        _mu: &Ensemble,
        _c: &StateC,
        _u: &DVector<f64>,
    ) -> DMatrix<f64> {
        let d = self.params.dim;
        let mut b = DMatrix::zeros(d + self.params.strategies, d);
        for i in 0..d {
            b[(i, i)] = 1.0;
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
        let ns = self.params.strategies;
        let x = self.x(c);
        let xt = self.x(c_tilde);
        let mut jac = DMatrix::zeros(d + ns, d + ns);
        jac.view_mut((0, 0), (d, d))
            .copy_from(&self.params.kernel.jacobian(&diff(xt, x)));
        // Only the x' argument of the payoff moves; the mass's own density
        // does not enter the velocity.
        let s2 = self.params.payoff_width * self.params.payoff_width;
        let e = self.envelope(x, xt);
        let r = diff(x, xt);
        let bbar = self.mean_profile(&c.lam);
        for k in 0..ns {
            for j in 0..d {
                jac[(d + k, j)] = (self.profile[k] - bbar) * c.lam[k] * r[j] / s2 * e;
            }
        }
        jac
    }

    fn running(&self, _t: f64, _mu: &Ensemble, c: &StateC, u: &DVector<f64>) -> f64 {
        let w = &self.params.weights;
        w.goal * norm2(&diff(self.x(c), &self.goal)) + w.control_cost(u)
    }

    fn running_state_grad(
        &self,
        _t: f64,
        _mu: &Ensemble,
        c: &StateC,
        _u: &DVector<f64>,
    ) -> DVector<f64> {
        let mut g = DVector::zeros(self.layout().dim());
        for (j, r) in diff(self.x(c), &self.goal).iter().enumerate() {
            g[j] = 2.0 * self.params.weights.goal * r;
        }
        g
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
        _mu: &Ensemble,
        _c: &StateC,
        _u: &DVector<f64>,
        _c_tilde: &StateC,
    ) -> DVector<f64> {
        DVector::zeros(self.layout().dim())
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
        let mut g = DVector::zeros(self.layout().dim());
        for (j, r) in diff(self.x(c_tilde), &self.goal).iter().enumerate() {
            g[j] = 2.0 * self.params.weights.terminal * r;
        }
        g
    }
}
