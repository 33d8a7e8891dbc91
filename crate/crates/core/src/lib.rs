//! Cellular channel-quality generation.
//!
//! The crate synthesizes multi-cell RSRP/SINR datasets from closed-form
//! path-loss models and trains a conditional denoising diffusion model
//! (a small 2D transformer over the time and attribute axes) to generate
//! per-user RSRP/SINR series. Training follows a two-stage schedule: a
//! teacher stage on physics-derived RSRP labels, then a student stage on
//! measured labels with a blended noise/physics objective.
//!
//! Module map:
//!
//! - [`propagation`]: free-space, Hata and WINNER II path loss, link budget.
//! - [`scenario`]: base-station layouts, trajectories, shadowing, serving
//!   cell selection, interference, SINR, dataset synthesis.
//! - [`diffusion`]: noise schedule, forward marginal, reverse sampler.
//! - [`tensor`]: dense matrices and a reverse-mode gradient tape.
//! - [`denoiser`]: the conditional noise predictor.
//! - [`training`]: teacher/student stages, early stopping, few-shot runs.
//! - [`metrics`]: JSD, TV and NRMSE.
//! - [`persistence`]: dataset files and binary checkpoints.
//! - [`config`]: flat key-value experiment configuration.
//! - `cli`: the `cqgen` command line (feature `cli`, on by default).

#[cfg(feature = "cli")]
pub mod cli;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod persistence;
pub mod propagation;
pub mod scenario;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
