//! Constraint-conditioned layout generation: layout types, constraint
//! encodings, differentiable losses, matching, metrics, synthetic data and a
//! toy generator with its trainer.

pub mod constraints;
pub mod diagnostics;
pub mod error;
pub mod layout;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod numerics;
pub mod synthdata;

pub use error::{Error, Result};
pub mod genmodel;
