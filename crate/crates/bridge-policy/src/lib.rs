//! Policy learning via diffusion bridges.
//!
//! Observations are embedded as the terminal state of a stochastic
//! differential equation, a denoiser is trained with a data-prediction
//! objective, and actions are sampled from the observation-informed prior
//! with a closed-form fast reverse solver. The crate ships desk-scale
//! synthetic imitation tasks, a small hand-differentiated network stack, and
//! oracle-based verification of every formula.

pub mod bridge;
pub mod config;
pub mod envs;
pub mod net;
pub mod policy;
pub mod checkpoint;
pub mod sampler;
pub mod trainer;
pub mod verify;
pub mod schedule;
