//! Alignment learning from synthetic feedback at desk scale.
//!
//! The pipeline ranks responses from a lattice of generator configurations,
//! trains a reward model on the resulting comparisons, synthesizes
//! demonstrations with reward-guided self-play, fine-tunes a policy on them
//! and finally optimizes it with KL-penalized PPO. A built-in byte-level
//! language model and a toy world with a computable quality oracle make every
//! stage runnable and measurable on a laptop.

pub mod config;
pub mod dataset;
pub mod error;
pub mod evalharness;
pub mod genbackend;
pub mod optim;
pub mod pipeline;
pub mod policytrain;
pub mod querygen;
pub mod rm;
pub mod rng;
pub mod scalar;
pub mod simulate;
pub mod synthcmp;
pub mod toyworld;
pub mod types;

pub use error::{Error, GenError, Result};
pub use scalar::Scalar;

/// Single-precision language model used throughout the pipeline.
pub type Lm = genbackend::tinylm::TinyLm<f32>;
/// Double precision, for gradient checks.
pub type Lm64 = genbackend::tinylm::TinyLm<f64>;
pub type Rm = rm::RewardModel<f32>;
pub type Rm64 = rm::RewardModel<f64>;
