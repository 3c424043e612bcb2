//! Co-salient object detection: given a group of images that share an object
//! category, predict a mask of that common object in every image.
//!
//! The crate is self-contained: a small reverse-mode autodiff tensor engine,
//! a ViT-style encoder, transformer modules for consensus extraction (GSAT /
//! ILIAT) and image-specific dispersion (CTCA / ITD / A&A), an FPN-style
//! decoder, saliency metrics, a synthetic dataset generator, and a training
//! loop. Everything is generic over the scalar type: `f32` for training,
//! `f64` for finite-difference gradient checking.

pub mod encoder;
pub mod error;
pub mod scalar;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::{Tape, TensorId};

/// Tape recording `f32` arithmetic (training precision).
pub type Tape32 = Tape<f32>;
/// Tape recording `f64` arithmetic (gradient-check precision).
pub type Tape64 = Tape<f64>;
