//! Model-based reinforcement learning with a dropout ensemble, two-step
//! model training and particle-based MPC.

pub mod agent;
pub mod envs;
pub mod error;
pub mod experiment;
pub mod model;
pub mod nn;
pub mod planner;
pub mod probe;
pub mod propagation;
pub mod regression;
pub mod rng;

pub use error::{Error, Result};
