//! Simulator for a pipelined GPU-scratchpad embedding cache used in
//! recommendation-model training: trace synthesis, the functional reference,
//! the cache controller and pipeline, comparison baselines, and an analytic
//! cost model.

pub mod baselines;
pub mod config;
pub mod controller;
pub mod cost;
pub mod embedding;
pub mod error;
pub mod experiment;
pub mod pipeline;
pub mod run;
pub mod seed;
pub mod workload;

pub use error::{Error, Result};
