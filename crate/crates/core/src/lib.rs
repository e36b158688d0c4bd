//! Continual relation extraction with memory replay for analogous relations.

pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod heads;
pub mod memory;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
