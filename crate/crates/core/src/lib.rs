//! Policy-lag laboratory.
//!
//! A simulated asynchronous actor-learner harness with VACO (V-trace advantage
//! realignment plus total-variation filtered policy optimisation), PPO-clip,
//! PPO-KL, SPO and IMPALA learners, and an exact tabular oracle for the
//! underlying performance-difference bounds.

pub mod advantage;
pub mod approx;
pub mod asyncsim;
pub mod config;
pub mod env;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod oracle;
pub mod par;
pub mod policyopt;
pub mod rng;
pub mod verify;

pub use error::{LabError, Result};
