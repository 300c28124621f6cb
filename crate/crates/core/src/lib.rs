//! Allocation of constrained tracking resources among targets observed over
//! lossy channels.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: the discretised constant-velocity motion model, truth
//!   propagation and intermittent observations.
//! - [`filter`]: Kalman filtering where the measurement update only runs when
//!   an observation actually arrives.
//! - [`riccati`]: the modified algebraic Riccati operator, its fixed point and
//!   the critical arrival probability.
//! - [`policy`]: water-filling feasibility, the minimax greedy allocator and
//!   the particle-swarm policy search.
//! - [`schedule`]: compilation of a probability vector into a binary
//!   attempt matrix with evenly spread attempts.
//! - [`sim`]: scenario orchestration and metric logging.

pub mod error;
pub mod filter;
pub mod linalg;
pub mod model;
pub mod policy;
pub mod riccati;
pub mod rng;
pub mod schedule;
pub mod sim;

pub use error::{Error, Result};
