//! Ready-made problems used by the tests, the verify suite and the CLI.

use std::f64::consts::PI;

use rand::Rng;

use crate::dynamics::{ControlSchedule, NeedleSpec, TimeGrid};
use crate::geometry::{Ensemble, Layout, Mode, StateC};
use crate::models::smooth::{Gain, GaussianBump, GaussianKernel, Poly};
use crate::models::{
    ControlValue, LeaderFollowerModel, LeaderFollowerParams, Model, ReplicatorModel,
    ReplicatorParams, RunningWeights,
};

pub struct Scenario {
    pub name: String,
    pub model: Box<dyn Model>,
    pub grid: TimeGrid,
    pub mu0: Ensemble,
    pub schedule: ControlSchedule,
    pub dictionary: Vec<ControlValue>,
    pub u_max: f64,
}

/// Radical inverse of `index` in `base` (the Halton sequence).
pub fn halton(mut index: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while index > 0 {
        f /= base as f64;
        r += f * (index % base) as f64;
        index /= base;
    }
    r
}

const PRIMES: [usize; 8] = [2, 3, 5, 7, 11, 13, 17, 19];

/// `n` particles from the first `n` Halton points (index 1 onwards): positions
/// in `center +- half_width`, leader label `s` uniform in `(0, 1)`.
/// Prefixes of the sequence are nested, so larger `n` refines smaller ones.
pub fn halton_leader_follower(n: usize, dim: usize, center: &[f64], half_width: f64) -> Ensemble {
    let layout = Layout::simplex(dim, 2);
    let particles = (1..=n)
        .map(|i| {
            let x = (0..dim)
                .map(|j| center[j] + half_width * (2.0 * halton(i, PRIMES[j]) - 1.0))
                .collect();
            let s = halton(i, PRIMES[dim]);
            StateC::new(x, vec![s, 1.0 - s])
        })
        .collect();
    Ensemble { layout, particles }
}

/// Density profiles `1 + a sin(2 pi (v + phase))` on the strategy grid,
/// normalised to mean one.
pub fn halton_replicator(n: usize, model: &ReplicatorParams) -> Ensemble {
    let layout = Layout::density(model.dim, model.strategies, model.lower, model.upper);
    let ns = model.strategies;
    let particles = (1..=n)
        .map(|i| {
            let x = (0..model.dim)
                .map(|j| 2.0 * halton(i, PRIMES[j]) - 1.0)
                .collect();
            let phase = halton(i, PRIMES[model.dim]);
            let amp = 0.6 * halton(i, PRIMES[model.dim + 1]);
            let raw: Vec<f64> = (0..ns)
                .map(|k| 1.0 + amp * (2.0 * PI * ((k as f64 + 0.5) / ns as f64 + phase)).sin())
                .collect();
            StateC::new(x, normalise_density(raw))
        })
        .collect();
    Ensemble { layout, particles }
}

fn normalise_density(raw: Vec<f64>) -> Vec<f64> {
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    raw.iter().map(|l| l / mean).collect()
}

/// Random admissible state. Simplex labels are normalised exponentials;
/// densities are drawn in `[lo, hi]` and normalised to mean one.
pub fn random_state(layout: &Layout, rng: &mut impl Rng, x_range: f64) -> StateC {
    let x = (0..layout.d)
        .map(|_| rng.gen_range(-x_range..x_range))
        .collect();
    let lam = match layout.mode {
        Mode::Simplex => {
            let raw: Vec<f64> = (0..layout.n)
                .map(|_| -rng.gen_range(1e-3f64..1.0).ln())
                .collect();
            let s: f64 = raw.iter().sum();
            let mut lam: Vec<f64> = raw.iter().map(|v| v / s).collect();
            // Exact unit sum.
            let rest: f64 = lam[1..].iter().sum();
            lam[0] = 1.0 - rest;
            lam
        }
        Mode::Density { lower, upper } => loop {
            let hi = upper.min(3.0);
            let lo = (lower * 2.0).max(0.2).min(0.9);
            let lam = normalise_density((0..layout.n).map(|_| rng.gen_range(lo..hi)).collect());
            if lam.iter().all(|&l| l > lower && l < upper) {
                break lam;
            }
        },
    };
    StateC::new(x, lam)
}

pub fn random_ensemble(layout: &Layout, n: usize, rng: &mut impl Rng, x_range: f64) -> Ensemble {
    Ensemble {
        layout: *layout,
        particles: (0..n).map(|_| random_state(layout, rng, x_range)).collect(),
    }
}

/// Constant unit pushes along each axis, zero, and a saturated feedback to `target`.
pub fn steering_dictionary(dim: usize, u_max: f64, target: &[f64]) -> Vec<ControlValue> {
    let mut dict = vec![ControlValue::zero(dim)];
    for j in 0..dim {
        for sign in [1.0, -1.0] {
            let mut v = vec![0.0; dim];
            v[j] = sign * u_max;
            dict.push(ControlValue::constant(v));
        }
    }
    for gain in [0.5, 2.0] {
        dict.push(ControlValue::Linear {
            gain,
            target: target.to_vec(),
            u_max,
        });
    }
    dict
}

/// Leader/follower swarm in the plane steered towards the origin,
/// `N = 16`, `T = 2`, 200 steps.
pub fn steering() -> Scenario {
    let params = LeaderFollowerParams::default();
    let model = LeaderFollowerModel::new(params).expect("default parameters are valid");
    let grid = TimeGrid {
        t0: 0.0,
        t1: 2.0,
        steps: 200,
    };
    let mu0 = halton_leader_follower(16, 2, &[2.0, 0.5], 1.0);
    let u_max = 1.0;
    let dictionary = steering_dictionary(2, u_max, &[0.0, 0.0]);
    Scenario {
        name: "steering".into(),
        model: Box::new(model),
        grid,
        mu0,
        schedule: ControlSchedule::constant(grid.steps, dictionary[0].clone()),
        dictionary,
        u_max,
    }
}

/// Parameters with every interaction switched off and `h = 1`, so `A = (u, 0)`.
pub fn pure_control_params(dim: usize) -> LeaderFollowerParams {
    let off = GaussianKernel {
        amplitude: 0.0,
        width: 1.0,
    };
    let no_rate = GaussianBump {
        amplitude: 0.0,
        width: 1.0,
    };
    LeaderFollowerParams {
        dim,
        kernel_ff: off,
        kernel_lf: off,
        kernel_fl: off,
        kernel_ll: off,
        rate_f: no_rate,
        rate_l: no_rate,
        h: Gain::Constant { value: 1.0 },
        cohesion: 0.0,
        weights: RunningWeights {
            goal: 0.0,
            control: 0.0,
            control_exponent: 2.0,
            terminal: 1.0,
        },
        ..Default::default()
    }
}

/// `x' = u`, `u in {-1, 0, 1}`, `phi = x(T)^2`, `x(0) = 1`, `T = 1`, 4 steps.
pub fn bang() -> Scenario {
    let model = LeaderFollowerModel::new(pure_control_params(1)).expect("valid parameters");
    let grid = TimeGrid {
        t0: 0.0,
        t1: 1.0,
        steps: 4,
    };
    let mu0 = Ensemble {
        layout: Layout::simplex(1, 2),
        particles: vec![StateC::new(vec![1.0], vec![0.0, 1.0])],
    };
    let dictionary = vec![
        ControlValue::constant(vec![-1.0]),
        ControlValue::constant(vec![0.0]),
        ControlValue::constant(vec![1.0]),
    ];
    Scenario {
        name: "bang".into(),
        model: Box::new(model),
        grid,
        mu0,
        schedule: ControlSchedule::constant(grid.steps, dictionary[1].clone()),
        dictionary,
        u_max: 1.0,
    }
}

/// Leader/follower system without running cost, `N = 8`, `T = 1`, used for
/// needle variations and duality checks.
pub fn needle(steps: usize) -> (Scenario, NeedleSpec) {
    let params = LeaderFollowerParams {
        cohesion: 0.0,
        weights: RunningWeights {
            goal: 0.0,
            control: 0.0,
            control_exponent: 2.0,
            terminal: 1.0,
        },
        rate_f: GaussianBump {
            amplitude: 0.8,
            width: 1.0,
        },
        rate_l: GaussianBump {
            amplitude: 0.8,
            width: 1.0,
        },
        ..Default::default()
    };
    let model = LeaderFollowerModel::new(params).expect("valid parameters");
    let grid = TimeGrid {
        t0: 0.0,
        t1: 1.0,
        steps,
    };
    let mu0 = halton_leader_follower(8, 2, &[1.0, 0.0], 1.0);
    let base = ControlValue::constant(vec![0.3, -0.2]);
    let omega = ControlValue::constant(vec![-0.6, 0.5]);
    let scenario = Scenario {
        name: "needle".into(),
        model: Box::new(model),
        grid,
        mu0,
        schedule: ControlSchedule::constant(steps, base.clone()),
        dictionary: vec![base, omega.clone()],
        u_max: 1.0,
    };
    (
        scenario,
        NeedleSpec {
            tau: 0.5,
            eps: 0.1,
            omega,
        },
    )
}

/// Replicator population on a line with 8 strategies.
pub fn replicator(n: usize) -> Scenario {
    let params = ReplicatorParams {
        goal: vec![0.5],
        ..Default::default()
    };
    let mu0 = halton_replicator(n, &params);
    let model = ReplicatorModel::new(params).expect("default parameters are valid");
    let grid = TimeGrid {
        t0: 0.0,
        t1: 1.0,
        steps: 100,
    };
    let u_max = 1.0;
    let dictionary = steering_dictionary(1, u_max, &[0.5]);
    Scenario {
        name: "replicator".into(),
        model: Box::new(model),
        grid,
        mu0,
        schedule: ControlSchedule::constant(grid.steps, dictionary[0].clone()),
        dictionary,
        u_max,
    }
}

/// Leader/follower parameters whose label dynamics is `lam' = Q lam` with
/// `Q = [[-1, 1], [1, -1]]` for a single agent: unit switching rates and no
/// spatial interaction.
pub fn two_state_chain_params() -> LeaderFollowerParams {
    let flat = GaussianBump {
        amplitude: 1.0,
        width: 1e6,
    };
    LeaderFollowerParams {
        rate_f: flat,
        rate_l: flat,
        ell_f: Poly::new(vec![1.0]),
        ell_l: Poly::new(vec![1.0]),
        ..pure_control_params(1)
    }
}
