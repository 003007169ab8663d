//! Core algorithms for contrast-phase CT classification with a
//! disentangling GAN: intensity preprocessing, procedural phantoms,
//! a small CPU conv-net stack with hand-written backprop, the
//! adversarial/classification objectives, Adam, and evaluation metrics.
//!
//! Everything in this crate is pure computation over in-memory data.
//! File formats, checkpoint IO and the command-line front end live in
//! the companion `cdgan-cli` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod adam;
pub mod error;
pub mod evaluate;
pub mod metrics;
pub mod nets;
pub mod objectives;
pub mod params;
pub mod phantom;
pub mod phase;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::CoreError;
pub use phase::{PhaseCode, PhaseLabel};
