//! Receding-horizon motion planning with local dynamic games.
//!
//! Every agent repeatedly ranks the other agents by how strongly they interact with it, forms a
//! small generalized Nash game with the top `p`, solves it, and applies the first control of its
//! own equilibrium policy.

pub mod config;
pub mod dynamics;
pub mod error;
pub mod game;
pub mod harness;
pub mod planner;
pub mod selection;
pub mod solver;

pub use error::{Error, Result};
