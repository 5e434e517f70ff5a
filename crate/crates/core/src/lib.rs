// Kernels and oracles are written as explicit index loops.
#![allow(clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod attention;
pub mod autograd;
pub mod block;
pub mod checkpoint;
mod error;
pub mod io;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod params;
pub mod rng;
pub mod suite;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{set_finite_checks, DType, Scalar, Tensor};
