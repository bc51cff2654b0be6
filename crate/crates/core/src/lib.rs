//! Core numerics for the densepipe gender-from-radiograph pipeline.
//!
//! Everything in this crate is pure computation over owned values: dense
//! f64 tensors, the differentiable layer primitives, dense-connectivity
//! model graphs, optimizers and the training loop, classification metrics,
//! Grad-CAM heatmaps, dataset manifests with stratified splits, and the
//! synthetic radiograph-proxy generator. No IO, no clocks, no threads;
//! the companion `densepipe` crate layers files and the CLI on top.
//!
//! The crate is `no_std` + `alloc` so the math can be reused anywhere a
//! heap exists.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod checkpoint;
pub mod error;
pub mod gradcam;
pub mod gradcheck;
pub mod graph;
pub mod image;
pub mod manifest;
pub mod metrics;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
