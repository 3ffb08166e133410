//! Networks and training for single-image SVBRDF estimation.
//!
//! `tensor`, `kernels`, `graph` and `params` form a small reverse-mode
//! autodiff engine over 4-D NCHW tensors, generic over `f32` (training) and
//! `f64` (gradient checks). The rest builds the generator, the patch
//! discriminator, their losses, the two-stream trainer, checkpoints and
//! evaluation on top of it.

pub mod error;
pub mod tensor;
pub mod kernels;
pub mod graph;
pub mod params;
pub mod layers;
pub mod convert;

pub mod generator;
pub mod discriminator;
pub mod losses;
pub mod trainer;
pub mod checkpoint;
pub mod evaluation;

pub use error::{ModelError, Result};
