//! Guided reverse diffusion for image pairs.

pub mod denoiser;
pub mod sampler;
pub mod schedule;

pub use denoiser::{Denoiser, DenoiserConfig, DiffusionConfig, OracleDenoiser, TinyUnet};
pub use sampler::{sample_duo, BranchInput, SamplerConfig, SamplerMode};
pub use schedule::NoiseSchedule;
