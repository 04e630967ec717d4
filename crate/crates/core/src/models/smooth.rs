//! Smooth scalar profiles and interaction kernels used to assemble the models.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Polynomial `sum_k coeffs[k] * s^k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Poly {
    pub coeffs: Vec<f64>,
}

impl Poly {
    pub fn new(coeffs: Vec<f64>) -> Self {
        Self { coeffs }
    }

    pub fn identity() -> Self {
        Self::new(vec![0.0, 1.0])
    }

    pub fn eval(&self, s: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * s + c)
    }

    pub fn deriv(&self, s: f64) -> f64 {
        self.coeffs
            .iter()
            .enumerate()
            .skip(1)
            .rev()
            .fold(0.0, |acc, (k, c)| acc * s + k as f64 * c)
    }

    /// Min and max over a uniform sample of `[0, 1]`.
    pub fn sampled_range(&self, samples: usize) -> (f64, f64) {
        (0..=samples)
            .map(|k| self.eval(k as f64 / samples as f64))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v), hi.max(v))
            })
    }
}

fn smoothstep(t: f64) -> (f64, f64) {
    if t <= 0.0 {
        (0.0, 0.0)
    } else if t >= 1.0 {
        (1.0, 0.0)
    } else {
        (t * t * (3.0 - 2.0 * t), 6.0 * t * (1.0 - t))
    }
}

/// `C^1` regularisation of the indicator of `{s >= threshold}`: the cubic
/// smoothstep over `[threshold - margin, threshold + margin]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Smoothstep {
    pub threshold: f64,
    pub margin: f64,
}

impl Smoothstep {
    pub fn eval(&self, s: f64) -> f64 {
        smoothstep((s - self.threshold + self.margin) / (2.0 * self.margin)).0
    }

    pub fn deriv(&self, s: f64) -> f64 {
        smoothstep((s - self.threshold + self.margin) / (2.0 * self.margin)).1 / (2.0 * self.margin)
    }
}

impl Default for Smoothstep {
    fn default() -> Self {
        Self {
            threshold: 0.3,
            margin: 0.2,
        }
    }
}

/// Control gain profile `h(lambda)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Gain {
    /// `level * (1 - smoothstep(s / zero_from))`, identically zero for `s >= zero_from`.
    Cutoff {
        level: f64,
        zero_from: f64,
    },
    Constant {
        value: f64,
    },
}

impl Gain {
    pub fn eval(&self, s: f64) -> f64 {
        match *self {
            Gain::Cutoff { level, zero_from } => level * (1.0 - smoothstep(s / zero_from).0),
            Gain::Constant { value } => value,
        }
    }

    pub fn deriv(&self, s: f64) -> f64 {
        match *self {
            Gain::Cutoff { level, zero_from } => -level * smoothstep(s / zero_from).1 / zero_from,
            Gain::Constant { .. } => 0.0,
        }
    }
}

impl Default for Gain {
    fn default() -> Self {
        Gain::Cutoff {
            level: 1.0,
            zero_from: 0.8,
        }
    }
}

/// Vector kernel `K(z) = amplitude * z * exp(-|z|^2 / (2 width^2))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianKernel {
    pub amplitude: f64,
    pub width: f64,
}

impl GaussianKernel {
    pub fn eval(&self, z: &[f64]) -> DVector<f64> {
        let e = self.envelope(z);
        DVector::from_iterator(z.len(), z.iter().map(|v| self.amplitude * e * v))
    }

    /// Jacobian `dK/dz`.
    pub fn jacobian(&self, z: &[f64]) -> DMatrix<f64> {
        let e = self.amplitude * self.envelope(z);
        let s2 = self.width * self.width;
        DMatrix::from_fn(z.len(), z.len(), |i, j| {
            let delta = if i == j { 1.0 } else { 0.0 };
            e * (delta - z[i] * z[j] / s2)
        })
    }

    fn envelope(&self, z: &[f64]) -> f64 {
        (-z.iter().map(|v| v * v).sum::<f64>() / (2.0 * self.width * self.width)).exp()
    }
}

/// Scalar bump `H(z) = amplitude * exp(-|z|^2 / (2 width^2))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianBump {
    pub amplitude: f64,
    pub width: f64,
}

impl GaussianBump {
    pub fn eval(&self, z: &[f64]) -> f64 {
        self.amplitude
            * (-z.iter().map(|v| v * v).sum::<f64>() / (2.0 * self.width * self.width)).exp()
    }

    pub fn grad(&self, z: &[f64]) -> DVector<f64> {
        let h = self.eval(z);
        let s2 = self.width * self.width;
        DVector::from_iterator(z.len(), z.iter().map(|v| -v / s2 * h))
    }
}

pub(crate) fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(p, q)| p - q).collect()
}

pub(crate) fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}
