//! Weak-constraint data assimilation by variational annealing followed by
//! VA-informed, importance-weighted Metropolis sampling of the path and
//! parameter posterior.
//!
//! The pipeline:
//!
//! 1. [`twin`] simulates a Lorenz96 truth and noisy partial observations.
//! 2. [`anneal`] minimizes the [`action`] over whole paths while the model
//!    precision `R_f` is raised geometrically, tracking each initialization.
//! 3. Predictions past the window rank the minima; the best and worst cells
//!    set the center and width of a Gaussian bias.
//! 4. [`sampler`] runs an ensemble of walkers shaped by that bias and
//!    reweights recorded states to estimate marginals and expectations.
//!
//! [`pipeline`] wires the stages together with on-disk artifacts; the
//! `smc-da` binary exposes them as subcommands.

pub mod action;
pub mod anneal;
pub mod config;
pub mod csvio;
pub mod dynamics;
pub mod error;
pub mod optimizer;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod twin;

pub use action::{ActionConfig, ActionValue, Path};
pub use dynamics::ModelSpec;
pub use error::{Error, Result};
pub use twin::{NoiseSpec, Observations};
