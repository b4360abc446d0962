//! Optimise-predict-optimise (OPO) pipeline core.
//!
//! A data-acquisition (DA) decision `s` is produced by an orienteering solver
//! driven by a learnable surrogate reward vector `pi`. The acquired tiles are fed
//! to a masked-input vision transformer that predicts per-tile travel costs, and
//! those predictions parameterise a node-weighted shortest path problem. Both
//! combinatorial stages are made differentiable so the whole chain can be
//! trained end to end.
//!
//! This crate is `no_std` and only needs `alloc`. File formats, the CLI and
//! wall-clock time live in the companion `opo` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod datagen;
pub mod diffopt;
mod error;
pub mod model;
pub mod rng;
pub mod solvers;
mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
