//! Oracle checks: finite differences against every analytic differential,
//! duality conservation along needle variations, and particle-count
//! refinement studies. Every report is reproducible from its seed.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{needle_field, solve_state, NeedleSpec};
use crate::error::{invalid, Result};
use crate::field;
use crate::geometry::{
    in_state_space, max_feasible_step, w1_empirical, Ensemble, Layout, Mode, StateC, TangentVec,
};
use crate::models::{self, ControlValue, Model};
use crate::pmp::{mayer_terminal, solve_adjoint, summed_pairing};
use crate::scenarios::{random_ensemble, random_state, Scenario};
use crate::sensitivity::propagate_ensemble;

pub const CDIFF_TOL: f64 = 1e-6;
pub const SLOPE_MIN: f64 = 0.9;
pub const FD_STEPS: [f64; 6] = [1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7];
pub const MU_EPS: [f64; 4] = [1e-2, 1e-3, 1e-4, 1e-5];

/// Names of the analytic differentials a check exercises.
pub const D_C_A: &str = "D_c A";
pub const GRAD_MU_A: &str = "grad_mu A";
pub const D_C_L: &str = "D_c l";
pub const GRAD_MU_L: &str = "grad_mu L";
pub const GRAD_MU_PHI: &str = "grad_mu phi";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub instances: usize,
    /// Worst relative error (or drift) over all instances.
    pub worst_error: f64,
    /// Slope estimates, one per instance or per refinement pair.
    pub slopes: Vec<f64>,
    /// Raw measured sequence where meaningful (drifts, distances).
    pub values: Vec<f64>,
    pub tolerance: f64,
    pub passed: bool,
    pub seed: u64,
    pub covered: Vec<String>,
    pub failures: Vec<String>,
}

impl CheckReport {
    pub fn min_slope(&self) -> f64 {
        self.slopes.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn summary(&self) -> String {
        format!(
            "{:<28} {:<4} instances={:<4} worst={:.3e} min_slope={:.3} tol={:.1e}",
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.instances,
            self.worst_error,
            self.min_slope(),
            self.tolerance
        )
    }
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let num: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let den: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    num / den
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn random_tangent(layout: &Layout, rng: &mut impl Rng) -> TangentVec {
    let dx: Vec<f64> = (0..layout.d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut dlam: Vec<f64> = (0..layout.n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mean = dlam.iter().sum::<f64>() / layout.n as f64;
    dlam.iter_mut().for_each(|l| *l -= mean);
    let norm = dx.iter().chain(&dlam).map(|v| v * v).sum::<f64>().sqrt();
    TangentVec {
        dx: dx.iter().map(|v| v / norm).collect(),
        dlam: dlam.iter().map(|v| v / norm).collect(),
    }
}

fn random_control(model: &dyn Model, rng: &mut impl Rng, trial: usize) -> ControlValue {
    let m = model.control_dim();
    if trial % 2 == 0 {
        let v: Vec<f64> = (0..m).map(|_| rng.gen_range(-0.7..0.7)).collect();
        ControlValue::constant(v)
    } else {
        ControlValue::Linear {
            gain: rng.gen_range(0.2..3.0),
            target: (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            u_max: 1.0,
        }
    }
}

/// A state close to the boundary of the label set.
fn boundary_state(layout: &Layout, rng: &mut impl Rng) -> StateC {
    let mut c = random_state(layout, rng, 2.0);
    match layout.mode {
        Mode::Simplex => {
            let s = rng.gen_range(1e-4..1e-2);
            c.lam = vec![0.0; layout.n];
            c.lam[0] = s;
            c.lam[1] = 1.0 - s;
        }
        Mode::Density { lower, .. } => {
            let low = lower * rng.gen_range(1.5..3.0);
            let n = layout.n as f64;
            let rest: f64 = c.lam[1..].iter().sum();
            let scale = (n - low) / rest;
            c.lam[0] = low;
            c.lam[1..].iter_mut().for_each(|l| *l *= scale);
        }
    }
    c
}

fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

struct Instance {
    mu: Ensemble,
    c: StateC,
    u: ControlValue,
    w: TangentVec,
}

fn instance(model: &dyn Model, seed: u64, trial: usize, particles: usize) -> Instance {
    let layout = model.layout();
    let mut rng = trial_rng(seed, trial);
    let mu = random_ensemble(&layout, particles, &mut rng, 2.0);
    let c = if trial % 5 == 4 {
        boundary_state(&layout, &mut rng)
    } else {
        random_state(&layout, &mut rng, 2.0)
    };
    let u = random_control(model, &mut rng, trial);
    let w = random_tangent(&layout, &mut rng);
    Instance { mu, c, u, w }
}

/// Best-step relative error of a central difference against `exact`.
fn best_fd(
    layout: &Layout,
    c: &StateC,
    w: &TangentVec,
    exact: &DVector<f64>,
    f: impl Fn(&StateC) -> DVector<f64>,
) -> Option<f64> {
    let denom = inf_norm(exact).max(1e-6);
    FD_STEPS
        .iter()
        .filter_map(|&h| {
            let cp = c.displaced(w, h);
            let cm = c.displaced(w, -h);
            if !(in_state_space(layout, &cp, 1e-13) && in_state_space(layout, &cm, 1e-13)) {
                return None;
            }
            let fd = (f(&cp) - f(&cm)) / (2.0 * h);
            Some(inf_norm(&(fd - exact)) / denom)
        })
        .reduce(f64::min)
}

/// Central differences of the velocity and of the running integrand along
/// random tangents, against `D_c A` and `D_c l` (closed loop), best step per instance.
pub fn fd_check_cdiff(model: &dyn Model, trials: usize, seed: u64) -> CheckReport {
    let layout = model.layout();
    let results: Vec<std::result::Result<f64, String>> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let inst = instance(model, seed, trial, 8);
            let (mu, c, u, w) = (&inst.mu, &inst.c, &inst.u, &inst.w);
            let wf = w.to_flat();
            let jac = models::closed_state_jacobian(model, 0.0, mu, 0, c, u);
            let ea = best_fd(&layout, c, w, &(&jac * &wf), |x| {
                models::closed_velocity(model, 0.0, mu, 0, x, u)
            });
            let gl = models::closed_running_grad(model, 0.0, mu, 0, c, u);
            let el = best_fd(&layout, c, w, &DVector::from_element(1, gl.dot(&wf)), |x| {
                DVector::from_element(1, models::closed_running(model, 0.0, mu, 0, x, u))
            });
            match (ea, el) {
                (Some(a), Some(l)) => Ok(a.max(l)),
                _ => Err(format!(
                    "trial {trial}: no admissible finite-difference step"
                )),
            }
        })
        .collect();
    let mut failures = Vec::new();
    let mut worst: f64 = 0.0;
    for (trial, r) in results.iter().enumerate() {
        match r {
            Ok(e) => {
                worst = worst.max(*e);
                if !(*e < CDIFF_TOL) {
                    failures.push(format!("trial {trial}: relative error {e:.3e}"));
                }
            }
            Err(msg) => failures.push(msg.clone()),
        }
    }
    CheckReport {
        name: "fd_check_cdiff".into(),
        instances: trials,
        worst_error: worst,
        slopes: Vec::new(),
        values: Vec::new(),
        tolerance: CDIFF_TOL,
        passed: failures.is_empty() && trials > 0,
        seed,
        covered: vec![D_C_A.into(), D_C_L.into()],
        failures,
    }
}

/// Slope of the residual of a first-order expansion in `eps`; `None` when
/// the residual is at rounding level throughout (the expansion is exact).
fn expansion_slope(eps: &[f64], resid: &[f64], scale: f64) -> Option<f64> {
    let floor = |e: f64| 1e-13 * (1.0 + scale) / e;
    let pts: Vec<(f64, f64)> = eps
        .iter()
        .zip(resid)
        .filter(|(e, r)| **r > floor(**e))
        .map(|(e, r)| (*e, *r))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    Some(loglog_slope(&x, &y))
}

/// Moving one particle of `mu` by `eps w`: compares the change of the
/// velocity, of `L` and of `phi` with the Wasserstein differentials.
pub fn fd_check_mugrad(model: &dyn Model, trials: usize, seed: u64) -> CheckReport {
    let layout = model.layout();
    let results: Vec<(f64, f64)> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut inst = instance(model, seed, trial, 8);
            let n = inst.mu.len();
            let j = trial % n;
            let cj = inst.mu.particles[j].clone();
            let reach = max_feasible_step(&layout, &cj, &inst.w, 1.0);
            if reach < 0.2 {
                inst.w = TangentVec {
                    dx: inst.w.dx.clone(),
                    dlam: inst.w.dlam.iter().map(|v| v * reach / 0.2).collect(),
                };
            }
            let (mu, c, u, w) = (&inst.mu, &inst.c, &inst.u, &inst.w);
            let wf = w.to_flat();
            let ucur = u.eval(0, c);
            let a0 = models::closed_velocity(model, 0.0, mu, 0, c, u);
            let pred_a = model.mu_gradient(0.0, mu, c, &ucur, &cj) * &wf / n as f64;
            let l0 = field::running_value(model, 0.0, mu, u);
            let pred_l = (models::running_mu_covector(model, 0.0, mu, u, j) / n as f64).dot(&wf);
            let p0 = model.terminal(mu);
            let pred_p = (model.terminal_mu_grad(mu, &cj) / n as f64).dot(&wf);

            let mut ra = Vec::new();
            let mut rl = Vec::new();
            let mut rp = Vec::new();
            for &e in &MU_EPS {
                let mut me = mu.clone();
                me.particles[j] = cj.displaced(w, e);
                let qa = (models::closed_velocity(model, 0.0, &me, 0, c, u) - &a0) / e;
                ra.push(inf_norm(&(qa - &pred_a)));
                rl.push(((field::running_value(model, 0.0, &me, u) - l0) / e - pred_l).abs());
                rp.push(((model.terminal(&me) - p0) / e - pred_p).abs());
            }
            let slopes = [
                expansion_slope(&MU_EPS, &ra, inf_norm(&a0)),
                expansion_slope(&MU_EPS, &rl, l0.abs()),
                expansion_slope(&MU_EPS, &rp, p0.abs()),
            ];
            let slope = slopes
                .iter()
                .flatten()
                .copied()
                .fold(f64::INFINITY, f64::min);
            let rel = (ra[3] / inf_norm(&pred_a).max(1e-6))
                .max(rl[3] / pred_l.abs().max(1e-6))
                .max(rp[3] / pred_p.abs().max(1e-6));
            (slope, rel)
        })
        .collect();
    let mut failures = Vec::new();
    for (trial, (s, _)) in results.iter().enumerate() {
        if !(*s >= SLOPE_MIN) {
            failures.push(format!("trial {trial}: slope {s:.3}"));
        }
    }
    CheckReport {
        name: "fd_check_mugrad".into(),
        instances: trials,
        worst_error: results.iter().map(|r| r.1).fold(0.0, f64::max),
        slopes: results.iter().map(|r| r.0).collect(),
        values: Vec::new(),
        tolerance: SLOPE_MIN,
        passed: failures.is_empty() && trials > 0,
        seed,
        covered: vec![GRAD_MU_A.into(), GRAD_MU_L.into(), GRAD_MU_PHI.into()],
        failures,
    }
}

/// Pairing drift along one needle run.
pub struct PairingRun {
    /// `sum_i <p_i, w_i>` at nodes from `tau` to `T`.
    pub pairing: Vec<f64>,
    /// `max_k |pairing_k - pairing_tau| / |pairing_tau|`.
    pub drift: f64,
}

/// Solves the state, the Mayer costates and the ensemble perturbation
/// started at `tau` by the needle field, and measures the summed pairing.
pub fn pairing_run(scenario: &Scenario, spec: &NeedleSpec) -> Result<PairingRun> {
    let model = scenario.model.as_ref();
    let traj = solve_state(model, &scenario.grid, &scenario.mu0, &scenario.schedule)?;
    let costates = solve_adjoint(
        model,
        &traj,
        &scenario.schedule,
        &mayer_terminal(model, traj.final_state()),
    )?;
    let w0 = needle_field(model, &traj, &scenario.schedule, spec)?;
    let from = spec.window(&scenario.grid)?.1;
    let w = propagate_ensemble(model, &traj, &scenario.schedule, &w0, from)?;
    let pairing = summed_pairing(&model.layout(), &costates, &w, from);
    let p0 = pairing[0];
    if p0 == 0.0 {
        return invalid("the pairing vanishes at tau; choose another needle");
    }
    let drift = pairing
        .iter()
        .map(|p| (p - p0).abs() / p0.abs())
        .fold(0.0, f64::max);
    Ok(PairingRun { pairing, drift })
}

/// Pairing drift for every step count; passes if the drift at the finest
/// step is below `tol` and the drift decays at least at order `min_order`.
pub fn check_conserved_pairing(
    make: impl Fn(usize) -> (Scenario, NeedleSpec),
    steps: &[usize],
    tol: f64,
    min_order: f64,
) -> CheckReport {
    let mut values = Vec::new();
    let mut failures = Vec::new();
    let mut dts = Vec::new();
    for &s in steps {
        let (sc, spec) = make(s);
        match pairing_run(&sc, &spec) {
            Ok(run) => {
                values.push(run.drift);
                dts.push(sc.grid.dt());
            }
            Err(e) => failures.push(format!("{s} steps: {e}")),
        }
    }
    let slopes: Vec<f64> = if values.len() >= 2 && values.iter().all(|v| *v > 0.0) {
        vec![loglog_slope(&dts, &values)]
    } else {
        Vec::new()
    };
    let finest = values.last().copied().unwrap_or(f64::INFINITY);
    if !(finest < tol) {
        failures.push(format!(
            "drift {finest:.3e} at the finest step exceeds {tol:.1e}"
        ));
    }
    if let Some(&s) = slopes.first() {
        if s < min_order {
            failures.push(format!("drift order {s:.3} below {min_order}"));
        }
    } else if values.iter().any(|v| *v > 1e-14) {
        failures.push("could not estimate the drift order".into());
    }
    CheckReport {
        name: "check_conserved_pairing".into(),
        instances: steps.len(),
        worst_error: finest,
        slopes,
        values,
        tolerance: tol,
        passed: failures.is_empty(),
        seed: 0,
        covered: vec![D_C_A.into(), GRAD_MU_A.into(), GRAD_MU_PHI.into()],
        failures,
    }
}

/// `W_1` between the solution with `N_k` particles, each repeated
/// `N_{k+1} / N_k` times, and the solution with `N_{k+1}` particles.
/// Passes if the sequence strictly decreases.
pub fn particle_convergence_study(
    make: impl Fn(usize) -> Scenario,
    sizes: &[usize],
) -> CheckReport {
    let mut failures = Vec::new();
    let mut values = Vec::new();
    if sizes.len() < 2
        || sizes.windows(2).any(|w| w[1] <= w[0] || w[1] % w[0] != 0)
        || sizes[sizes.len() - 1] > 512
    {
        failures.push("sizes must increase by integer factors and stay <= 512".into());
    } else {
        let finals: Vec<Result<Ensemble>> = sizes
            .iter()
            .map(|&n| {
                let sc = make(n);
                solve_state(sc.model.as_ref(), &sc.grid, &sc.mu0, &sc.schedule)
                    .map(|t| t.final_state().clone())
            })
            .collect();
        for (k, pair) in finals.windows(2).enumerate() {
            match (&pair[0], &pair[1]) {
                (Ok(a), Ok(b)) => match w1_empirical(&a.repeated(b.len() / a.len()), b) {
                    Ok(d) => values.push(d),
                    Err(e) => failures.push(format!("pair {k}: {e}")),
                },
                (Err(e), _) | (_, Err(e)) => failures.push(format!("pair {k}: {e}")),
            }
        }
        for (k, w) in values.windows(2).enumerate() {
            if !(w[1] < w[0]) {
                failures.push(format!(
                    "W1 does not decrease between refinements {k} and {}",
                    k + 1
                ));
            }
        }
    }
    CheckReport {
        name: "particle_convergence_study".into(),
        instances: sizes.len(),
        worst_error: values.last().copied().unwrap_or(f64::NAN),
        slopes: Vec::new(),
        values,
        tolerance: 0.0,
        passed: failures.is_empty(),
        seed: 0,
        covered: Vec::new(),
        failures,
    }
}

/// The differentials that the suite of reports exercises jointly.
pub fn coverage(reports: &[CheckReport]) -> Vec<String> {
    let mut all: Vec<String> = reports
        .iter()
        .flat_map(|r| r.covered.iter().cloned())
        .collect();
    all.sort();
    all.dedup();
    all
}

pub const ALL_DIFFERENTIALS: [&str; 5] = [D_C_A, GRAD_MU_A, D_C_L, GRAD_MU_L, GRAD_MU_PHI];
