//! Empirical-Bayes f-modeling for multi-domain causal representation learning.
//!
//! Observations `x = A z + ε` from several interventional domains are projected
//! onto the columns of `A = O D`, denoised with a Tweedie estimator driven by a
//! causal score model, and `A`, `σ²` are refit by EM.

pub mod cli;
pub mod config;
pub mod em;
pub mod error;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod numeric;
pub mod plot;
pub mod rng;
pub mod scm;
pub mod score;
pub mod splines;

pub use error::{Error, Result};
