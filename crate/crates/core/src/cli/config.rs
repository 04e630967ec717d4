//! Experiment configuration: a TOML file with the sections `model`, `grid`,
//! `ensemble`, `control`, `solver`, `verify` and `output`. Every section and
//! key is optional; missing values take the defaults below.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlSchedule, TimeGrid};
use crate::error::{Error, Result};
use crate::geometry::{Ensemble, StateC};
use crate::models::{
    ControlValue, LeaderFollowerModel, LeaderFollowerParams, Model, ReplicatorModel,
    ReplicatorParams,
};
use crate::pmp::SweepOptions;
use crate::scenarios::{
    halton_leader_follower, halton_replicator, random_ensemble, steering_dictionary, Scenario,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    LeaderFollower,
    Replicator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    pub leader_follower: LeaderFollowerParams,
    pub replicator: ReplicatorParams,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            family: Family::LeaderFollower,
            leader_follower: LeaderFollowerParams::default(),
            replicator: ReplicatorParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub t0: f64,
    pub t1: f64,
    pub steps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            t0: 0.0,
            t1: 2.0,
            steps: 200,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Nested low-discrepancy placement; larger ensembles refine smaller ones.
    Halton,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub particles: usize,
    pub placement: Placement,
    /// Centre of the positions; the model goal shifted by one unit when empty.
    pub center: Vec<f64>,
    pub half_width: f64,
    pub seed: u64,
    /// Explicit particle states; overrides `particles` and `placement`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub states: Option<Vec<StateC>>,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            particles: 16,
            placement: Placement::Halton,
            center: vec![2.0, 0.5],
            half_width: 1.0,
            seed: 0,
            states: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    pub u_max: f64,
    /// Feedback target of the default dictionary; the model goal when empty.
    pub target: Vec<f64>,
    /// Explicit dictionary; the default is zero, unit pushes along each axis
    /// and two saturated feedbacks.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dictionary: Option<Vec<ControlValue>>,
    /// Dictionary index used on every interval of the initial schedule.
    pub init: usize,
    /// Schedule JSON written by an earlier run; replaces `init`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule_file: Option<PathBuf>,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            u_max: 1.0,
            target: Vec::new(),
            dictionary: None,
            init: 0,
            schedule_file: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub trials: usize,
    pub seed: u64,
    /// Ensemble sizes of the `converge` command.
    pub sizes: Vec<usize>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            seed: 0,
            sizes: vec![8, 16, 32, 64],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub directory: PathBuf,
    /// Also write `plot.py`.
    pub plot: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("out"),
            plot: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub grid: GridConfig,
    pub ensemble: EnsembleConfig,
    pub control: ControlConfig,
    pub solver: SweepOptions,
    pub verify: VerifyConfig,
    pub output: OutputConfig,
}

/// On-disk schedule: one control per interval, plus dictionary indices when known.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub indices: Option<Vec<usize>>,
    pub values: Vec<ControlValue>,
}

/// Checks each key of a table on its own so that every bad key is reported.
fn check_keys<T: DeserializeOwned>(path: &str, table: &toml::Table, errors: &mut Vec<String>) {
    for (key, value) in table {
        let mut single = toml::Table::new();
        single.insert(key.clone(), value.clone());
        if let Err(e) = toml::Value::Table(single).try_into::<T>() {
            errors.push(format!("{path}.{key}: {}", e.message().trim()));
        }
    }
}

fn section<'a>(
    root: &'a toml::Table,
    name: &str,
    errors: &mut Vec<String>,
) -> Option<&'a toml::Table> {
    match root.get(name) {
        None => None,
        Some(toml::Value::Table(t)) => Some(t),
        Some(_) => {
            errors.push(format!("{name}: expected a table"));
            None
        }
    }
}

fn schema_errors(root: &toml::Table) -> Vec<String> {
    let mut errors = Vec::new();
    check_keys::<ExperimentConfig>("config", root, &mut errors);
    // Top-level errors for known sections are replaced by per-key messages.
    errors.retain(|e| {
        ![
            "model", "grid", "ensemble", "control", "solver", "verify", "output",
        ]
        .iter()
        .any(|s| e.starts_with(&format!("config.{s}:")))
    });
    if let Some(t) = section(root, "model", &mut errors) {
        let mut nested = t.clone();
        for name in ["leader_follower", "replicator"] {
            match nested.remove(name) {
                Some(toml::Value::Table(sub)) if name == "leader_follower" => {
                    check_keys::<LeaderFollowerParams>("model.leader_follower", &sub, &mut errors)
                }
                Some(toml::Value::Table(sub)) => {
                    check_keys::<ReplicatorParams>("model.replicator", &sub, &mut errors)
                }
                Some(v) => errors.push(format!(
                    "model.{name}: expected a table, got {}",
                    v.type_str()
                )),
                None => {}
            }
        }
        check_keys::<ModelConfig>("model", &nested, &mut errors);
    }
    macro_rules! flat {
        ($name:literal, $ty:ty) => {
            if let Some(t) = section(root, $name, &mut errors) {
                check_keys::<$ty>($name, t, &mut errors);
            }
        };
    }
    flat!("grid", GridConfig);
    flat!("ensemble", EnsembleConfig);
    flat!("control", ControlConfig);
    flat!("solver", SweepOptions);
    flat!("verify", VerifyConfig);
    flat!("output", OutputConfig);
    errors
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, base: &Path) -> Result<Self> {
        let root: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(vec![e.to_string().trim().to_string()]))?;
        let errors = schema_errors(&root);
        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        let mut config: ExperimentConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(vec![e.message().to_string()]))?;
        if let Some(p) = &config.control.schedule_file {
            if p.is_relative() {
                config.control.schedule_file = Some(base.join(p));
            }
        }
        let errors = config.semantic_errors();
        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        Ok(config)
    }

    /// All invariant violations, not just the first.
    pub fn semantic_errors(&self) -> Vec<String> {
        let mut errors = Vec::new();
        let dim = match self.model.family {
            Family::LeaderFollower => {
                errors.extend(
                    self.model
                        .leader_follower
                        .validate()
                        .into_iter()
                        .map(|e| format!("model.leader_follower: {e}")),
                );
                self.model.leader_follower.dim
            }
            Family::Replicator => {
                errors.extend(
                    self.model
                        .replicator
                        .validate()
                        .into_iter()
                        .map(|e| format!("model.replicator: {e}")),
                );
                self.model.replicator.dim
            }
        };
        let g = &self.grid;
        if g.steps == 0 || !(g.t1 > g.t0) || !g.t0.is_finite() || !g.t1.is_finite() {
            errors.push("grid: need finite t0 < t1 and steps >= 1".into());
        }
        let e = &self.ensemble;
        match &e.states {
            Some(s) if s.is_empty() => errors.push("ensemble.states: empty".into()),
            Some(_) => {}
            None => {
                if e.particles == 0 {
                    errors.push("ensemble.particles: must be >= 1".into());
                }
                if e.placement == Placement::Halton
                    && self.model.family == Family::LeaderFollower
                    && e.center.len() != dim
                {
                    errors.push(format!(
                        "ensemble.center: expected {dim} coordinates, got {}",
                        e.center.len()
                    ));
                }
                if !(e.half_width > 0.0) {
                    errors.push("ensemble.half_width: must be > 0".into());
                }
            }
        }
        let c = &self.control;
        if !(c.u_max > 0.0) {
            errors.push("control.u_max: must be > 0".into());
        }
        if !c.target.is_empty() && c.target.len() != dim {
            errors.push(format!(
                "control.target: expected {dim} coordinates, got {}",
                c.target.len()
            ));
        }
        let dict_len = match &c.dictionary {
            Some(d) => {
                if d.is_empty() {
                    errors.push("control.dictionary: empty".into());
                }
                for (k, w) in d.iter().enumerate() {
                    if w.dim() != dim {
                        errors.push(format!(
                            "control.dictionary[{k}]: control dimension {} but the model needs {dim}",
                            w.dim()
                        ));
                    }
                }
                d.len()
            }
            None => 2 * dim + 3,
        };
        if c.init >= dict_len {
            errors.push(format!(
                "control.init: index {} outside a dictionary of {dict_len} entries",
                c.init
            ));
        }
        if let Some(p) = &c.schedule_file {
            if !p.is_file() {
                errors.push(format!(
                    "control.schedule_file: {} does not exist",
                    p.display()
                ));
            }
        }
        let s = &self.solver;
        if !(s.damping > 0.0 && s.damping <= 1.0) {
            errors.push("solver.damping: must be in (0, 1]".into());
        }
        if s.max_iters == 0 {
            errors.push("solver.max_iters: must be >= 1".into());
        }
        if !(s.tol > 0.0) {
            errors.push("solver.tol: must be > 0".into());
        }
        let v = &self.verify;
        if v.trials == 0 {
            errors.push("verify.trials: must be >= 1".into());
        }
        if v.sizes.len() < 2 || v.sizes.windows(2).any(|w| w[1] <= w[0] || w[1] % w[0] != 0) {
            errors.push(
                "verify.sizes: need at least two sizes, each a multiple of the previous".into(),
            );
        }
        errors
    }

    pub fn model(&self) -> Result<Box<dyn Model>> {
        Ok(match self.model.family {
            Family::LeaderFollower => Box::new(LeaderFollowerModel::new(
                self.model.leader_follower.clone(),
            )?),
            Family::Replicator => Box::new(ReplicatorModel::new(self.model.replicator.clone())?),
        })
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.grid.t0, self.grid.t1, self.grid.steps)
    }

    /// Model goal, the origin when unset.
    fn goal(&self) -> Vec<f64> {
        let (goal, dim) = match self.model.family {
            Family::LeaderFollower => (
                &self.model.leader_follower.goal,
                self.model.leader_follower.dim,
            ),
            Family::Replicator => (&self.model.replicator.goal, self.model.replicator.dim),
        };
        if goal.is_empty() {
            vec![0.0; dim]
        } else {
            goal.clone()
        }
    }

    pub fn dictionary(&self, model: &dyn Model) -> Vec<ControlValue> {
        match &self.control.dictionary {
            Some(d) => d.clone(),
            None => {
                let target = if self.control.target.is_empty() {
                    self.goal()
                } else {
                    self.control.target.clone()
                };
                steering_dictionary(model.control_dim(), self.control.u_max, &target)
            }
        }
    }

    /// Initial ensemble with `n` particles (ignored for explicit states).
    pub fn ensemble(&self, model: &dyn Model, n: usize) -> Result<Ensemble> {
        let layout = model.layout();
        let e = &self.ensemble;
        let mu = match (&e.states, e.placement, self.model.family) {
            (Some(states), _, _) => Ensemble::new(layout, states.clone())?,
            (None, Placement::Halton, Family::LeaderFollower) => {
                halton_leader_follower(n, layout.d, &e.center, e.half_width)
            }
            (None, Placement::Halton, Family::Replicator) => {
                halton_replicator(n, &self.model.replicator)
            }
            (None, Placement::Random, _) => {
                let mut rng = ChaCha8Rng::seed_from_u64(e.seed);
                let mut mu = random_ensemble(&layout, n, &mut rng, e.half_width);
                for c in &mut mu.particles {
                    for (x, o) in c.x.iter_mut().zip(&e.center) {
                        *x += o;
                    }
                }
                mu
            }
        };
        mu.validate(1e-10)?;
        Ok(mu)
    }

    /// Initial schedule: the schedule file if given, else `init` everywhere.
    /// Also returns dictionary indices when every interval has one.
    pub fn initial_schedule(
        &self,
        grid: &TimeGrid,
        dictionary: &[ControlValue],
    ) -> Result<(ControlSchedule, Option<Vec<usize>>)> {
        let Some(path) = &self.control.schedule_file else {
            let idx = vec![self.control.init; grid.steps];
            return Ok((
                ControlSchedule::from_dictionary(dictionary, &idx),
                Some(idx),
            ));
        };
        let file: ScheduleFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if file.values.len() != grid.steps {
            return Err(Error::Config(vec![format!(
                "control.schedule_file: {} controls for {} intervals",
                file.values.len(),
                grid.steps
            )]));
        }
        let indices: Option<Vec<usize>> = file
            .values
            .iter()
            .map(|v| dictionary.iter().position(|w| w == v))
            .collect();
        Ok((
            ControlSchedule {
                values: file.values,
            },
            indices,
        ))
    }

    /// Full problem with `n` particles (`None` keeps the configured size).
    pub fn scenario(&self, n: Option<usize>) -> Result<Scenario> {
        let model = self.model()?;
        let grid = self.time_grid()?;
        let mu0 = self.ensemble(model.as_ref(), n.unwrap_or(self.ensemble.particles))?;
        let dictionary = self.dictionary(model.as_ref());
        let (schedule, _) = self.initial_schedule(&grid, &dictionary)?;
        Ok(Scenario {
            name: "config".into(),
            model,
            grid,
            mu0,
            schedule,
            dictionary,
            u_max: self.control.u_max,
        })
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(vec![format!("cannot read {}: {e}", path.display())]))?;
    let base = path.parent().unwrap_or(Path::new("."));
    ExperimentConfig::from_toml_str(&text, base)
}
