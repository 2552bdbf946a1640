//! Federated training with an invariant-gradient penalty.
//!
//! The crate simulates synchronous federated rounds where clients hold
//! heterogeneous environments, may upload stale or missing gradients, and
//! optionally train a penalized objective that suppresses the alignment
//! between each client's risk gradient and the parameters. On top of the
//! engine it provides environment generators with controllable spurious
//! correlations, a per-client contribution metric with a pretraining exit
//! strategy, and numerical checks of the accompanying convergence and
//! OOD-risk analysis.
//!
//! Everything is deterministic: a run is a pure function of its
//! configuration and seed, including thread-count-independent parallel
//! execution and byte-stable output files.

pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod params;
pub mod penalty;
pub mod rng;
pub mod sim;
pub mod theory;

pub use error::{CoreError, Result};
pub use params::ParamVec;
