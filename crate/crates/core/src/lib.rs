//! Contrastive meta-learning for activity recognition under domain shift.
//!
//! The crate is organised bottom-up:
//!
//! - [`scalar`], [`tensor`], [`tape`]: numerics and reverse-mode autodiff
//!   (generic over the scalar so dual numbers give exact second-order terms).
//! - [`data`]: windows, samples, domains and the flat [`data::ParameterSet`].
//! - [`augment`]: the six sensor augmentations and view generation.
//! - [`encoder`]: channel-independent patch transformer and conv fusion.
//! - [`heads`]: projection/classification heads and the losses.
//! - [`meta`]: bi-level meta-objective, its gradient, and the training loop.
//! - [`ingest`]: on-disk dataset format, grouping, LODO splits, synthetic data.
//! - [`experiment`]: run orchestration, sweeps and reports.

pub mod augment;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod heads;
pub mod ingest;
pub mod meta;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod spline;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
