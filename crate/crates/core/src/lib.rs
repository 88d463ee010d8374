//! Numerical core for lifelong, backward-compatible re-identification.
//!
//! Everything here is pure computation over in-memory values and builds
//! without `std`: reverse-mode autodiff, the synthetic benchmark generator,
//! the part-assisted model, its training objectives, the sequential trainer
//! and the retrieval metrics. Persistence and the CLI live in the `bcreid`
//! crate.

#![no_std]

extern crate alloc;

pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod hash;
mod kernels;
pub mod losses;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
