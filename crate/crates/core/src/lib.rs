//! Numerical laboratory for the singular perturbation of control problems
//! whose fast variable is a Heisenberg-Ornstein-Uhlenbeck diffusion.

// `!(x > 0.0)` is used on purpose so that NaN is rejected; index loops over
// small coordinate arrays read better than zipped iterators.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cellsolver;
pub mod cli;
pub mod effective;
pub mod error;
pub mod model;
pub mod operator;
pub mod rng;
pub mod sde;
pub mod twoscale;

pub use error::{Error, Result};
