//! Learned attention weights for aggregating sets of embedding vectors.
//!
//! An actor-critic agent visits the items of a set one by one and assigns
//! each a weight in `[0, 1]` after looking at a summary of the other items.
//! The weighted mean is the set's representation.

pub mod agent;
pub mod codec;
pub mod env;
pub mod eval;
pub mod experiment;
pub mod error;
pub mod nn;
pub mod offpolicy;
pub mod pgr;
pub mod synth;
pub mod temporal;

pub use error::{Error, Result};
