//! Personalized simulators learned from one offline trajectory per agent,
//! with ensemble model-predictive control on MountainCar and CartPole.

pub mod cli;
pub mod data;
pub mod envs;
pub mod eval;
pub mod error;
pub mod factor_model;
pub mod nn;
pub mod planner;
pub mod rng;
pub mod training;

pub use error::{Error, Result};

/// Crate version plus `git describe` output when built from a checkout.
pub const VERSION: &str = env!("PERSIM_VERSION");
