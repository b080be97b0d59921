//! Simulation-free training of continuous-depth models on paired data.
//!
//! Data and labels are embedded by learned encoders, a time-conditioned
//! dynamics network is regressed onto the velocity of a closed-form
//! interpolant between the two embeddings, and inference integrates the
//! learned ODE before decoding the terminal state.

// `!(a < b)` comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod exec;
pub mod field;
pub mod interpolants;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod solvers;
pub mod tensor;

pub use error::{Error, Result};
