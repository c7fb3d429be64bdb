//! Rotating chunk-local full-parameter optimization.
//!
//! Trainable parameters are split into byte-balanced row-slice chunks. One
//! chunk is active at a time: the backward pass only materializes gradients
//! for its slices, and only its AdamW state lives on the (simulated) device.
//! Accounting and convergence modules measure what that buys.

pub mod accounting;
pub mod autodiff;
pub mod checks;
pub mod config;
pub mod convergence;
pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod nn;
pub mod optim;
pub mod partition;
pub mod reference;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
