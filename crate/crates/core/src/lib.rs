//! Learned per-sample generation policies for iterative samplers.
//!
//! A policy network chooses sampler parameters (mask ratios, temperatures,
//! guidance scales, truncation, timesteps) at every step of a MaskGIT,
//! autoregressive, diffusion-ODE or rectified-flow sampler. It is trained with
//! PPO against an adversarial reward model, on toy worlds whose predictors are
//! exact so every mechanism can be checked against an oracle.

pub mod agent;
pub mod blend;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod refine;
pub mod rewards;
pub mod rl;
pub mod runner;
pub mod samplers;
pub mod transforms;
pub mod worlds;

pub use error::{Error, Result};
