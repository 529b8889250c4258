//! Core of a one-shot domain adaptation pipeline for style-based generators.
//!
//! Given a single image from an unseen target domain, the pipeline projects
//! it onto a pretrained generator's output manifold ([`adapt::project`]),
//! nudges the generator's synthesis weights toward it ([`adapt::shift`]),
//! grafts the target's fine style layers onto random samples
//! ([`mixing::mix_styles`]), and trains a detector on the result
//! ([`detector`]).
//!
//! The crate is `no_std` and only needs an allocator. File formats, the CLI
//! and the experiment harness live in the `oneshot` crate.
#![no_std]
// Float methods come from `num_traits` without std and are inherent with it
// (or when another crate in the graph turns on `num-traits/std`).
#![allow(unused_imports)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod adapt;
pub mod corpus;
pub mod detector;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod graph;
pub mod image;
mod kernels;
pub mod metrics;
pub mod mixing;
pub mod optim;
pub mod params;
pub mod perceptual;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod tsne;

pub use error::{Error, Result};
pub use generator::{Generator, GeneratorConfig, LatentCode, NoiseInput, StyleVector};
pub use graph::{Graph, Var};
pub use image::Image;
pub use scalar::Scalar;
pub use tensor::Tensor;
