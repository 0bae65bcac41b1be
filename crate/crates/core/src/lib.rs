//! Allocation-only core of GMBINet.
//!
//! Dense NCHW tensors, a reverse-mode tape, the GMBI block, network graphs
//! built from it, losses and metrics, analytic and counted cost models, and
//! the Adam/cosine optimizer step. Nothing here touches the filesystem or
//! the clock; the `gmbinet` crate layers IO, data and the CLI on top.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod checkpoint;
pub mod cost;
pub mod error;
pub mod gmbi;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{ConvSpec, Real, Shape, Tensor};
