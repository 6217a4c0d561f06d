//! Grokking vs. steady learning laboratory.
//!
//! Two toy tasks (Ising phase classification and modular addition), the
//! models that learn them, a weight-multiplier initialization that moves
//! training between grokking and steady learning, and the analyses run on the
//! trained models: feature interpretability, pruning/compressibility, and
//! Fisher-metric trajectory measures.

pub mod checkpoint;
pub mod compress;
pub mod error;
pub mod infogeo;
pub mod interp;
pub mod ising;
pub mod modadd;
pub mod models;
pub mod numerics;
pub mod rng;
pub mod trainer;

#[doc(hidden)]
pub mod testutil;

pub use error::{Error, Result};
