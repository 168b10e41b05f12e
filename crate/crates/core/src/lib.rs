//! Developmental scaffolding: a modulated sinusoidal coordinate network lays
//! down a spatial pre-pattern, and a neural cellular automaton grows the
//! target morphology from it. Both are trained jointly by backpropagation
//! through the whole rollout.

pub mod analysis;
pub mod dataset;
pub mod error;
pub mod goalnca;
pub mod gridcore;
pub mod harness;
pub mod nca;
pub mod prepattern;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
