//! Teacher-free layered self-distillation for small convolutional networks.
//!
//! The crate is `no_std` (with `alloc`) and holds everything that is pure
//! computation: a reverse-mode tensor engine, the rotation pretext task and
//! its joint label space, the multi-stage student with auxiliary branches,
//! the distillation losses, and the optimizer/epoch logic. File formats,
//! dataset parsers and the command line live in the `lsskd` crate.
#![cfg_attr(not(any(test, feature = "std")), no_std)]
// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod autodiff;
pub mod data;
pub mod distill;
mod error;
pub mod gradcheck;
pub mod network;
mod real;
pub mod rng;
pub mod ss_task;
mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::{DType, Real};
pub use tensor::Tensor;
