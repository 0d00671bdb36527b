//! Masked diffusion transformers at desk scale.
//!
//! A ViT-style denoiser whose encoder only sees the unmasked patches of a
//! noised image, trained with EDM-preconditioned denoising score matching
//! plus reconstruction of the masked patches, then sampled with a Heun ODE
//! solver and classifier-free guidance.

pub mod backbone;
pub mod cli;
pub mod config;
pub mod diffusion;
pub mod efficiency;
pub mod error;
pub mod frechet;
pub mod image;
pub mod nn;
pub mod objective;
pub mod patch;
pub mod ppm;
pub mod sampler;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
