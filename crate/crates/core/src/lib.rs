//! Ranking-supervised variational autoencoders with a learned per-pair trust
//! variable, plus the synthetic data, metrics and training loop needed to
//! evaluate them.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod nets;
pub mod report;
pub mod rng;
pub mod runner;
pub mod train;

pub use error::{Error, Result};
