//! Objectives, discriminators, optimizer and the training loop.

pub mod discriminator;
pub mod losses;
pub mod optim;
pub mod trainer;

pub use losses::{AdversarialObjective, LossWeights};
pub use trainer::{select_best, PairSource, TrainConfig, TrainReport, Trainer};
