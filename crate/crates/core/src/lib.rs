//! Volumetric segmentation toolkit.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense 5-D `f32` tensors, the convolution / pooling / normalisation
//!   kernels a 3D encoder-decoder needs, and a dynamic reverse-mode tape.
//! * [`volume`]: physical-space volumes, the `VOL1` container and a synthetic
//!   fractured-bone generator.
//! * [`preprocess`]: HU clamping, windowing, resampling and patch handling.
//! * [`model`]: the encoder/decoder network with cross-scale attention gates.
//! * [`losses`]: exact signed distance transform, surface loss, soft Dice.
//! * [`metrics`]: DSC, ASSD and symmetric 95% Hausdorff distance.
//! * [`trainer`]: Adam, cosine annealing, the training loop and inference.
//! * [`gradsuite`]: finite-difference checks over all of the above.
//!
//! Kernels are data-parallel through rayon when the `parallel` feature is on;
//! [`parallel::set_enabled`] switches to the sequential path at runtime.

pub mod config;
pub mod error;
pub mod gradsuite;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod preprocess;
pub mod tensor;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
