//! Worst-case distribution shift search for predictive resource allocation.
//!
//! Individuals are grouped into allocation instances. A shift reweights both
//! the instances and the individuals inside each instance, constrained to χ²
//! balls around the empirical distribution. The search maximizes the expected
//! decision loss of a fixed predictor with a Frank-Wolfe method over offset
//! variables, and small instances can be checked against an exact oracle.

// `!(x >= 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod engine;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod oracle;
pub mod predictors;
pub mod rng;
pub mod uncertainty;

pub use error::{Error, ErrorClass, Result};
