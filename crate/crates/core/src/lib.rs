//! Online tracking of time-varying AC optimal power flow for coupled
//! transmission and distribution grids.

// Index loops mirror the math; negated comparisons reject NaN on purpose.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod coordination;
pub mod error;
pub mod grid;
pub mod harness;
pub mod linalg;
pub mod nlp;
pub mod pdipm;
pub mod scenario;
pub mod tracker;

pub use error::{Error, Result};
