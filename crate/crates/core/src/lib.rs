//! Vector multiplicative error models with spillover effects and a common
//! co-movement component, for panels of range-based volatility.

// `!(x > 0.0)` is used on purpose so NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cluster;
pub mod error;
pub mod estimate;
pub mod evaluate;
pub mod factor;
pub mod io;
pub mod model;
pub mod optim;
pub mod panel;

pub use error::{Error, Result};
