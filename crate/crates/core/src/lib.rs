//! Consistency-policy reinforcement fine-tuning for simulated manipulation.

pub mod batch;
pub mod collect;
pub mod buffers;
pub mod consistency;
pub mod critic;
pub mod encoder;
pub mod envs;
pub mod error;
pub mod intervention;
pub mod nn;
pub mod recipe;
pub mod record;
pub mod reward;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
