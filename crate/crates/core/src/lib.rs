//! Deterministic simulator of sequence-parallel attention and post-training.

pub mod attention;
pub mod comm;
pub mod error;
pub mod harness;
pub mod losses;
pub mod model;
pub mod partition;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
