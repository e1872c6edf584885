//! Recurrent switching dynamical systems with exact likelihoods.

pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod flow;
pub mod math;
pub mod model;
pub mod nnet;
pub mod params;
pub mod rmsm;
pub mod rng;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
