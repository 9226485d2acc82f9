//! Pitch/timbre disentanglement with a Gaussian-mixture VAE.
//!
//! `no_std` + `alloc`. Enable the default `std` feature for runtime SIMD
//! dispatch in the matrix kernels.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod corpus;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod float;
pub mod gmvae;
pub mod graph;
pub mod latent;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
pub use float::Float;
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
