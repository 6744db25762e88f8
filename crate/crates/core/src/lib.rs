//! Stochastic pruning masks for dense networks and linear models, with
//! PAC-Bayes certificates for the pruned predictors.

pub mod bounds;
pub mod config;
pub mod criteria;
pub mod data;
pub mod linear;
pub mod error;
pub mod io;
pub mod masks;
pub mod nn;
pub mod pipelines;
pub mod rng;

pub use error::{Error, Result};
