//! Classical iterative solvers, their deep-unfolded trainable counterparts,
//! and the harness used to compare them.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod bench;
pub mod classical;
mod container;
pub mod datagen;
pub mod error;
pub mod linalg;
pub mod rng;
pub mod rpca;
pub mod sparse;
pub mod tensor;
pub mod training;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
