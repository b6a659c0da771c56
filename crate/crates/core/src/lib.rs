//! Prioritized-information world models for model-based RL.
//!
//! The crate bundles everything needed to learn latent state-space models
//! that favour controllable and reward-relevant information over
//! action-independent distractors:
//!
//! - [`nn`]: a small dense-network substrate with manual backprop, Adam and
//!   finite-difference gradient checks.
//! - [`env`]: factored distractor MDPs (controllable agent, drifting goal,
//!   action-independent distractor chains) with several observation renderers.
//! - [`mi`]: exact mutual-information oracles and the NCE, NWJ and
//!   reconstruction lower bounds over a bilinear critic.
//! - [`empowerment`]: Blahut–Arimoto channel capacity and the variational
//!   empowerment bound.
//! - [`world_model`]: encoder, forward, inverse and reward heads with the
//!   constrained Lagrangian objective and its primal-dual updates.
//! - [`agent`]: imagination rollouts, empowerment-augmented λ-returns and the
//!   outer training loop.
//! - [`metrics`]: the shortest-path graph-kernel similarity and linear probes.
//! - [`theory`]: exact tabular machinery (policy evaluation, abstractions,
//!   value-difference bound, controllability probe experiment).
//! - [`cli`]: the command implementations behind the `primi` binary.
//!
//! See `examples/` for one runnable program per capability.

pub mod agent;
pub mod cli;
pub mod empowerment;
pub mod env;
pub mod error;
pub mod metrics;
pub mod mi;
pub mod nn;
pub mod rng;
pub mod theory;
pub mod world_model;

pub use error::{Error, Result};
