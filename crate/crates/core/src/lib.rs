//! Masked latent diffusion for unsupervised anomaly detection.
//!
//! Everything needed to train and run the pipeline on a desk-scale synthetic
//! corpus lives here: the diffusion noise schedule, random patch masking, a
//! reverse-mode autodiff engine with a dual-head denoiser (clean-latent and
//! mask predictions), a convolutional latent codec, the masked forward and
//! reverse (DDPM / DDIM) processes, anomaly-map construction, segmentation
//! metrics, and the synthetic phantom generator with ground-truth lesions.
//!
//! The crate is `no_std`-compatible (requires `alloc`); enable the `libm`
//! feature instead of `std` for freestanding builds. IO, file formats and the
//! command-line front end live in the companion `madad` crate.

#![cfg_attr(not(feature = "std"), no_std)]

#[cfg(all(not(feature = "std"), not(feature = "libm")))]
compile_error!("madad-core requires either the `std` or the `libm` feature");

extern crate alloc;

pub mod anomaly;
pub mod autodiff;
pub mod codec;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod mask;
pub(crate) mod math;
pub mod nn;
pub mod optim;
pub mod phantom;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
