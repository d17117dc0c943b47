//! Denoising diffusion path planner for a robot end effector.
//!
//! A denoiser trained on synthetic straight-line paths, labelled with
//! discounted obstacle returns, is sampled with classifier-free guidance,
//! inpainting and optional cost guidance to produce collision-free paths,
//! and executed in a receding-horizon loop against a simulated world.

pub mod checkpoint;
pub mod dataset;
pub mod denoiser;
pub mod environment;
pub mod error;
pub mod geometry;
pub mod matrix;
mod format;
mod nn;
pub mod planner;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
