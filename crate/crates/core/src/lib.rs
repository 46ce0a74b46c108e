//! Crowd density estimation with multi-scale feature aggregation.
//!
//! Everything is `f64` and CPU-only; every differentiable op has an explicit
//! backward pass (see [`nn`] and [`model`]).

pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
