//! Adversarial training with self-supervised pretext tasks.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense f32 tensors, a reverse-mode differentiation tape and
//!   the checkpoint container format.
//! * [`model`]: two-headed classifiers (shared trunk, supervised head,
//!   self-supervision head).
//! * [`sstask`]: rotation and jigsaw pretext transforms.
//! * [`attack`]: PGD adversaries under l2 and l∞ constraints.
//! * [`train`]: adversarial training modes T0–T3 and adversarial
//!   self-supervised pre-training.
//! * [`data`]: dataset ingestion, splits, augmentation and corruptions.
//! * [`eval`]: accuracy sweeps and CSV reports.
//! * [`config`]: the experiment configuration schema.

pub mod attack;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod optim;
pub mod rng;
pub mod sstask;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
