//! Perceptron model of policy-gradient learning on multi-step tasks.
//!
//! A student perceptron learns from outcome rewards over episodes of `T`
//! binary decisions, scored against a fixed teacher. The crate provides a
//! finite-dimension simulator, the deterministic order-parameter ODEs that
//! describe it as the input dimension grows, optimal curriculum schedules and
//! a fixed-point analysis of the penalised reward.

pub mod error;
pub mod experiment;
pub mod model;
pub mod ode;
pub mod phase;
pub mod rng;
pub mod sched;
pub mod sim;
pub mod trajectory;

pub use error::{Error, Result};
