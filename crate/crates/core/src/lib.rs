//! Forward-backward stochastic jump neural networks for partial
//! integro-differential equations.
//!
//! The crate simulates jump-diffusion paths, fits a single network
//! `u(t, x)` to the backward equation through a one-step transfer loss, and
//! reports error metrics against closed-form solutions.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod experiment;
pub mod jumpsim;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod problems;
pub mod scheme;
pub mod tensor;

pub use error::{Error, Result};
