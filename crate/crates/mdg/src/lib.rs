//! Masked denoising generation for multi-agent trajectory modeling.
//!
//! The crate trains a transformer denoiser over spatiotemporal action
//! tensors corrupted by per-agent, per-timestep noise masks, rolls the
//! denoised actions through a differentiable unicycle model, and exposes
//! one-step / multi-step / guided / closed-loop inference plus an
//! evaluation-metric suite over procedurally generated traffic scenes.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod geom;
pub mod infer;
pub mod kinematics;
pub mod metrics;
pub mod model;
pub mod noisefield;
pub mod rng;
pub mod synthworld;
pub mod tensor;
pub mod trace;
pub mod train;

pub use error::{MdgError, Result};
