use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::StateC;

/// A control in effect on one time interval.
///
/// Feedback fields act on every agent through its own state; open-loop
/// values are given per agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlValue {
    /// `u(c) = value`.
    Constant { value: Vec<f64> },
    /// `u(c) = sat(gain * (target - x))` with the smooth saturation
    /// `z -> z * u_max / sqrt(u_max^2 + |z|^2)`, so `|u| < u_max`.
    Linear {
        gain: f64,
        target: Vec<f64>,
        u_max: f64,
    },
    /// `u_i = values[i]` for agent `i`.
    OpenLoop { values: Vec<Vec<f64>> },
}

impl ControlValue {
    pub fn constant(value: Vec<f64>) -> Self {
        ControlValue::Constant { value }
    }

    pub fn zero(m: usize) -> Self {
        ControlValue::Constant {
            value: vec![0.0; m],
        }
    }

    /// Control dimension.
    pub fn dim(&self) -> usize {
        match self {
            ControlValue::Constant { value } => value.len(),
            ControlValue::Linear { target, .. } => target.len(),
            ControlValue::OpenLoop { values } => values.first().map_or(0, Vec::len),
        }
    }

    pub fn is_state_independent(&self) -> bool {
        !matches!(self, ControlValue::Linear { .. })
    }

    /// Checks dimensions against `(m, agents)` and the bound `|u| <= u_max`.
    pub fn validate(&self, m: usize, agents: usize, u_max: f64) -> Result<()> {
        let bound = u_max * (1.0 + 1e-12);
        match self {
            ControlValue::Constant { value } => {
                if value.len() != m {
                    return invalid(format!(
                        "constant control has dim {}, expected {m}",
                        value.len()
                    ));
                }
                if norm(value) > bound {
                    return invalid(format!(
                        "constant control {value:?} exceeds u_max = {u_max}"
                    ));
                }
            }
            ControlValue::Linear {
                gain,
                target,
                u_max: own,
            } => {
                if target.len() != m {
                    return invalid("linear feedback target has the wrong dimension");
                }
                if !(gain.is_finite() && *own > 0.0 && *own <= bound) {
                    return invalid(
                        "linear feedback needs a finite gain and 0 < u_max <= global u_max",
                    );
                }
            }
            ControlValue::OpenLoop { values } => {
                if values.len() != agents {
                    return invalid(format!(
                        "open-loop control has {} agents, ensemble has {agents}",
                        values.len()
                    ));
                }
                for (i, v) in values.iter().enumerate() {
                    if v.len() != m {
                        return invalid(format!(
                            "open-loop value of agent {i} has the wrong dimension"
                        ));
                    }
                    if norm(v) > bound {
                        return invalid(format!("open-loop value of agent {i} exceeds u_max"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Value for `agent` at state `c`.
    pub fn eval(&self, agent: usize, c: &StateC) -> DVector<f64> {
        match self {
            ControlValue::Constant { value } => DVector::from_column_slice(value),
            ControlValue::OpenLoop { values } => DVector::from_column_slice(&values[agent]),
            ControlValue::Linear {
                gain,
                target,
                u_max,
            } => {
                let z = DVector::from_iterator(
                    target.len(),
                    target.iter().zip(&c.x).map(|(t, x)| gain * (t - x)),
                );
                let s = u_max / (u_max * u_max + z.norm_squared()).sqrt();
                z * s
            }
        }
    }

    /// `D_c u` as an `m x dim` matrix; only the first `m` position
    /// coordinates are read by feedback fields. `None` when `u` does not
    /// depend on the state.
    pub fn state_jacobian(&self, c: &StateC, dim: usize) -> Option<DMatrix<f64>> {
        let ControlValue::Linear {
            gain,
            target,
            u_max,
        } = self
        else {
            return None;
        };
        let m = target.len();
        let z = DVector::from_iterator(m, target.iter().zip(&c.x).map(|(t, x)| gain * (t - x)));
        let s = u_max / (u_max * u_max + z.norm_squared()).sqrt();
        let s3 = s * s * s / (u_max * u_max);
        let mut jac = DMatrix::zeros(m, dim);
        for i in 0..m {
            for j in 0..m {
                let du_dz = if i == j { s } else { 0.0 } - s3 * z[i] * z[j];
                jac[(i, j)] = -gain * du_dz;
            }
        }
        Some(jac)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
