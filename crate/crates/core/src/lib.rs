pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod objectives;
pub mod params;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{HugError, Result};
