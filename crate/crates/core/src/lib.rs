//! Decentralized multi-agent reinforcement learning with per-agent student /
//! self-learning acting modes and a team-shared attention teacher selector.

pub mod agent;
pub mod ats;
pub mod env;
pub mod error;
pub mod harness;
pub mod nn;

pub use error::{Error, Result};
