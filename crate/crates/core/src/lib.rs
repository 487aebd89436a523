//! Time-variant duo-image inpainting toolkit.

pub mod cli;
pub mod complement;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod features;
pub mod indite;
pub mod metrics;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
