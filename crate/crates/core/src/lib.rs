//! Learning local Lindbladians from steady-state expectation values.

pub mod constraints;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod model;
pub mod pauli;
pub mod recovery;
pub mod steady_state;
pub mod stitching;

pub use error::{Error, Result};
