//! Semantic correspondence by similarity-aware selective scanning of 4D
//! correlation volumes.

pub mod autodiff;
pub mod error;
pub mod flops;
pub mod io;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod runs;
pub mod ssm;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod transfer;

pub use error::{Error, Result};
pub use tensor::{Permutation, Real, Tensor};
