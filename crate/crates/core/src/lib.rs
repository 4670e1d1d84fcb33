//! Double machine learning with latent-variable models of the second-stage
//! residuals.
//!
//! The pipeline is: cross-fitted ElasticNet residualization ([`dml`]), then an
//! EM fit of a latent noise model on the pooled residuals ([`latent`]), then
//! the adjusted score equation for the causal effect. [`synthetic`] and
//! [`harness`] provide the benchmark scenarios and the Monte Carlo runner, and
//! [`cli`] is the command-line front end.

pub mod cli;
pub mod dml;
pub mod elasticnet;
pub mod error;
pub mod harness;
pub mod latent;
pub mod numerics;
pub mod synthetic;

pub use error::{Error, Result};
