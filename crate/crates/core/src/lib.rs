//! Pontryagin-type optimal control for agent systems whose states live in a
//! convex set `C = R^d x K` (probability simplex or box-constrained density).
//!
//! Layers, bottom up: [`geometry`] (state space, tangents, costates, `W_1`),
//! [`models`] (velocity fields, costs and their differentials), [`dynamics`]
//! (invariance-preserving integration and needle variations),
//! [`sensitivity`] (linearised flows), [`pmp`] (Hamiltonians, adjoints and the
//! forward-backward sweep), [`verify`] (finite-difference and convergence
//! checks), [`scenarios`] (ready-made test problems) and [`cli`].

pub mod assignment;
pub mod cli;
pub mod dynamics;
pub mod error;
pub(crate) mod field;
pub mod geometry;
pub mod models;
pub mod pmp;
pub mod scenarios;
pub mod sensitivity;
pub mod verify;

pub use dynamics::{ControlSchedule, NeedleSpec, TimeGrid, Trajectory};
pub use error::{Error, Result};
pub use geometry::{
    canonical_dual, in_state_space, pairing, w1_empirical, CostateVec, Ensemble, Layout, Mode,
    StateC, TangentVec,
};
pub use models::{
    ControlValue, LeaderFollowerModel, LeaderFollowerParams, Model, ReplicatorModel,
    ReplicatorParams,
};
pub use pmp::{CostatePath, SweepReport};
pub use verify::CheckReport;
