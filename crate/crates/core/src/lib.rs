//! Consistent-object image-set generation and reference-conditioned denoising,
//! scaled down to models small enough to verify by brute force.

pub mod attention;
pub mod cli;
pub mod container;
pub mod datagen;
pub mod denoiser;
pub mod eval;
pub mod geometry;
pub mod rng;
pub mod sampler;
pub mod tensor;

pub use rng::Rng;
pub use tensor::{Tensor, TensorError, BLOCKED};
