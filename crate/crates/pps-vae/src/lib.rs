//! Learned context sets for convolutional conditional neural processes.
//!
//! A PPS-VAE couples a ConvCNP image completer with an amortised posterior
//! over *which* pixels the completer gets to observe. The posterior picks a
//! small set of pixel locations (the partial pixel specification), the values
//! at those locations are looked up in the image, and a low-dimensional
//! abstract latent summarises the pair. The generative side runs the other
//! way: abstract latent, then locations, then context values, then the
//! remaining pixels through the ConvCNP.
//!
//! The crate is organised as a library first; `examples/` holds one runnable
//! program per capability and the `pps-vae` binary is a thin front-end over
//! [`commands`].

pub mod commands;
pub mod data;
pub mod distributions;
pub mod error;
pub mod evaluation;
pub mod generative;
pub mod inference;
pub mod manifest;
pub mod nn;
pub mod objective;
pub mod render;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
