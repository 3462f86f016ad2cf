//! Multi-masking masked image modeling for word images.
//!
//! A tiny vision transformer autoencoder is pre-trained on three masking
//! branches at once (random patches, rectangular blocks, full-height column
//! spans) with shared weights, then evaluated by masked-region PSNR, mask to
//! character coverage, attention maps and a frozen-encoder linear probe.
//!
//! Everything runs in `f64` on the CPU with a small tape-based autodiff engine.

pub mod error;
pub mod eval;
pub mod image;
pub mod mask;
pub mod model;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
