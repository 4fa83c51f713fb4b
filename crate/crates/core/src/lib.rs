pub mod baselines;
pub mod data;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod memory;
pub mod network;
pub mod reservoir;
pub mod rules;

pub use error::{Error, Result};
