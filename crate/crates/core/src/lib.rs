//! Core library: diffusion MDP, networks, rewards, objectives and training.

pub mod autodiff;
pub mod baselines;
pub mod data;
pub mod error;
pub mod eval;
pub mod nets;
pub mod objectives;
pub mod optim;
pub mod oracle;
pub mod rewards;
pub mod rng;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
