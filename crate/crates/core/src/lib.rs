//! Early malware detection from API-call prefixes.
//!
//! A compact causal model predicts the calls an executable is about to make;
//! the predicted suffix is appended to the observed prefix and a contextual
//! encoder with a BiGRU-attention head scores the extended trace.

pub mod artifact;
pub mod checkpoint;
pub mod corpus;
pub mod detector;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod genlm;
pub mod head;
pub mod layers;
pub mod numerics;

pub use error::{Error, Result};
