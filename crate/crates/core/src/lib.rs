//! Conditional diffusion restoration of dark, noisy raw captures.
//!
//! A DDIM sampler drives an epsilon-predicting U-Net whose input is the
//! channel concatenation `[x_t | condition | time-melding estimate]`, where
//! the time-melding channel carries the previous step's clean-image estimate.
//! The crate also ships a synthetic degradation pipeline and the evaluation
//! metrics needed to exercise the model end to end on small images.

pub mod condition;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod image;
pub mod io;
pub mod metrics;
pub mod net;
pub mod registry;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
pub use image::ImagePlanes;
pub use schedule::{make_schedule, DiffusionSchedule};
