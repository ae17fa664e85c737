//! Retrieval-augmented multiple-choice reading comprehension.

pub mod ablation;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod retrieval;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
