pub mod attention;
pub mod benchmark;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod loop_core;
pub mod losses;
pub mod nn;
pub mod seed;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
