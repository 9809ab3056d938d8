//! Soft actor-critic with general-retrace multi-step targets on a
//! deterministic market-replay environment, plus the exact tabular and
//! finite-difference oracles that check each piece.

pub mod agent;
pub mod data;
pub mod env;
pub mod harness;
pub mod error;
pub mod nn;
pub mod replay;
pub mod tabular;
pub mod traces;

pub use error::{Error, Result};
