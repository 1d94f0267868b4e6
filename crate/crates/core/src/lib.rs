//! Graph in-context learning with adaptive prompt generation, selection
//! and augmentation.

pub mod augmenter;
pub mod error;
pub mod generator;
pub mod graph;
pub mod inference;
pub mod model;
pub mod rng;
pub mod selector;
pub mod sweep;
pub mod task_graph;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
