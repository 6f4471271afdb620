//! Long-term pre-training for set-prediction temporal action detection.

pub mod analysis;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod evalkit;
pub mod featbank;
pub mod matching;
pub mod nn;
pub mod pretext;
pub mod rng;
pub mod study;
pub mod synthesis;
pub mod trainer;

pub use error::{Error, Result};
