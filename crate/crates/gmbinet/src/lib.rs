//! Data handling, training loop, evaluation, benchmarking and the command
//! line for GMBINet, on top of `gmbinet-core`.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod io;
pub mod report;
pub mod trainer;

pub use error::{Error, Result};
