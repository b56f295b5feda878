//! Core numerics for sub-graph knowledge distillation on sensor graphs.
//!
//! One global teacher forecaster learns node embeddings; a soft clustering
//! network (autoencoder plus graph convolution tower) turns those embeddings
//! into row-stochastic sub-graph memberships; `K` small student forecasters
//! are distilled from the teacher under those memberships and fused with it.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the command
//! line and wall-clock timing live in the `kdsgl` companion crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod clustering;
mod error;
pub mod graph;
pub mod loss;
pub mod matrix;
pub mod metrics;
pub mod mlp;
pub mod students;
pub mod teacher;
pub mod trainer;

pub use autodiff::{ParamSet, Tape, Var};
pub use error::{Error, Result};
pub use loss::{LossTerm, ScalarLoss};
pub use matrix::Matrix;
