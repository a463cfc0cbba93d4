//! Guided diffusion sampling by per-step trajectory matching.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod control;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod oracle;
pub mod priors;
pub mod samplers;
pub mod schedule;
pub mod terminal;

pub use error::{Error, Result};
