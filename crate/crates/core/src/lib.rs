// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod fsutil;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod stats;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
