//! Table detection with a deformable composite backbone and an IoU cascade.
//!
//! This crate is `no_std` (with `alloc`) and holds everything that is pure
//! computation: a small dense tensor engine with reverse-mode autodiff,
//! regular and deformable convolution, box geometry, the dual backbone with
//! its feature pyramid, the three-stage cascade detector, multi-scale
//! voting, detection metrics and a synthetic document-page generator.
//!
//! File formats, the training harness and the command line live in the
//! companion `cdecnet` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod backbone;
pub mod checkpoint;
pub mod deform;
pub mod detector;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod graph;
pub mod image;
pub mod metrics;
pub mod msvote;
pub mod optim;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
