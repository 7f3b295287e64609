//! Core algorithms for W+-conditioned face personalization.
//!
//! Everything here is pure computation over owned buffers: latent algebra in
//! StyleGAN's W+ space, the timestep-conditioned latent adaptor (with its
//! hand-written backward pass), the training losses, LoRA composition,
//! the sampling pipeline with delayed token injection, and mask-merged
//! multi-subject composition. Pretrained models are reached only through
//! the traits in [`backend`]; [`backend::toy`] provides a small linear
//! implementation of every trait so each algorithm can be checked exactly.
//!
//! The crate is `no_std` and needs only `alloc`. File formats, the HTTP
//! service and the CLI live in the companion `pc` crate.

#![no_std]
#![forbid(unsafe_code)]
// Index loops mirror the tensor math they implement.
#![allow(clippy::needless_range_loop)]
#![allow(clippy::too_many_arguments)]

extern crate alloc;

pub mod adaptor;
pub mod backend;
pub mod composition;
mod error;
pub mod evaluation;
pub mod latent;
pub mod linalg;
pub mod lora;
pub mod losses;
pub mod optim;
pub mod pipeline;
pub mod rng;
mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Rounds a value to the nearest `f32`, keeping it in `f64` storage.
///
/// Persisted tensors are stored as 32-bit floats; values that pass through
/// this function survive a save/load cycle unchanged.
#[inline]
pub fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}
