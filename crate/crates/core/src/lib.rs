//! Stochastic maximum likelihood training of binary restricted Boltzmann
//! machines with a tempered negative phase.
//!
//! Three samplers drive the negative phase: a single persistent Gibbs chain
//! (SML), a fixed ladder of tempered chains with even/odd swap rounds
//! (SML-PT), and an adaptive ladder (SML-APT) that respaces the inverse
//! temperatures to minimize the round-trip time of particles and spawns new
//! chains when the average swap rate falls below a target.

pub mod error;
pub mod rbm;
pub mod tempering;
pub mod adaptation;
pub mod dataset;
pub mod training;
pub mod experiment;

pub use error::{Error, Result};
