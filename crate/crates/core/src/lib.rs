//! Simulator, networks and training loop for hybrid imitation and
//! reinforcement learning of visuomotor policies on a planar arm.

pub mod config;
pub mod demos;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod imitation;
pub mod nets;
pub mod ppo;
pub mod rng;
pub mod sim2d;
pub mod train;

pub use error::{Error, Result};
