//! Distractor generation for reading-comprehension multiple-choice questions
//! with a co-attention hierarchical encoder-decoder.

pub mod error;
pub mod model;
pub mod text;

pub use error::{ChnError, Result};
pub use model::{Chn, ModelConfig};
pub mod gradients;
pub mod synthetic;
pub mod trainer;
pub mod inference;
pub mod corpus;
pub mod evaluation;
