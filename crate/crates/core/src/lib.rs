// `!(x > 0.0)` is deliberate: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod encoding;
pub mod error;
pub mod moments;
pub mod pcp;

pub use error::{Error, Result};
pub mod estimator;
pub mod harness;
pub mod inference;
pub mod structure;
pub mod synthgen;
