//! Conditional diffusion super-resolution (x4) for license-plate images.
//!
//! The core pieces are a linear [`schedule::NoiseSchedule`], the forward and
//! reverse chains in [`diffusion`], a U-Net noise predictor in
//! [`denoiser`], paired-data handling in [`data`], the optimisation loop in
//! [`trainer`] and full-reference quality metrics in [`metrics`].

pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod resample;
pub mod schedule;
pub mod trainer;

pub use denoiser::{Denoiser, DenoiserConfig, DenoiserParams};
pub use error::{Error, Result};
pub use image::{ImageTensor, Range};
pub use schedule::NoiseSchedule;
