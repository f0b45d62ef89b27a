//! Turn-wise credit assignment for multi-turn reinforcement learning, at desk
//! scale and with no external ML framework.
//!
//! The crate trains a small log-linear token policy against a synthetic
//! collaborative dialogue game in which exactly one turn is causally decisive.
//! Credit for the sparse end-of-episode outcome is pushed down to individual
//! turns through an implicit process reward model (PRM): a second token model
//! trained online, purely from outcome labels via binary cross-entropy, whose
//! log-likelihood ratio against a frozen reference defines dense token
//! rewards. Per-turn sums of those token rewards either serve directly as
//! process rewards (`itpo`) or are converted through a temperature softmax
//! into weights that redistribute the outcome across turns (`norm_itpo`).
//! Baselines (`trajectory_share`, `uniform_dirichlet`, `token_level`) and
//! three advantage estimators (`rloo`, `grpo`, `gae`) complete the grid. The
//! policy is optimized with a turn-level clipped PPO surrogate.
//!
//! Everything is deterministic given a seed: random streams are derived by
//! counter-based splitting, and all batch reductions run in a fixed order, so
//! results are bit-identical under any parallel schedule.
//!
//! Module map:
//! - [`env`] — the Attribute-Elicitation game, rollouts, counterfactual oracle
//! - [`model`] — log-linear token models, features, exact gradients, Adam
//! - [`prm`] — implicit token rewards, BCE objective, online PRM updates
//! - [`attribution`] — per-turn reward strategies
//! - [`advantage`] — RLOO / GRPO / GAE and channel mixing
//! - [`ppo`] — turn-level ratios and the clipped surrogate
//! - [`train`] — the four-stage training loop
//! - [`diagnostics`] — rank statistics, stability tracking, probe sets
//! - [`config`] / [`harness`] / [`io`] — run configuration, CLI-facing
//!   commands, and artifact persistence

pub mod advantage;
pub mod attribution;
pub mod config;
pub mod diagnostics;
pub mod env;
pub mod error;
pub mod exec;
pub mod harness;
pub mod io;
pub mod model;
pub mod ppo;
pub mod prm;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
