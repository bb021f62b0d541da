//! Learnable intrinsic-reward generation with switching controls for
//! cooperative multi-agent reinforcement learning.
//!
//! The crate is organised bottom-up:
//!
//! - [`config`], [`rng`], [`metrics`]: run configuration, seeded substreams and CSV metrics.
//! - [`envs`]: the gridworld Dec-MDPs (three foraging variants and the corridor task).
//! - [`funcapprox`]: a small fully connected network with reverse-mode gradients and Adam.
//! - [`learners`]: PPO/GAE actor-critic learners for the N task agents (MAPPO and IPPO wiring).
//! - [`generator`]: the switching policy, the intrinsic-reward policy and the potential-difference reward.
//! - [`novelty`]: the exploration bonus used in the Generator objective (distillation or counts).
//! - [`theory`]: tabular operators, value iteration, switching rule, invariance audits and
//!   linear function approximation.

pub mod config;
pub mod envs;
pub mod funcapprox;
pub mod generator;
pub mod learners;
pub mod metrics;
pub mod novelty;
pub mod rng;
pub mod theory;

pub use config::{Algorithm, ExperimentId, NoveltyKind, RunConfig};
pub use rng::Rng;
