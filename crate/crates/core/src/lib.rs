//! Hierarchical fine-grained classification with semantic-guided attention
//! and tempered-KL label regularization across a category tree.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors, reverse-mode graph, gradient checker
//! * [`checkpoint`]: the `NTC1` named-tensor container
//! * [`taxonomy`]: category trees, label paths, score extension
//! * [`model`]: shared trunk plus per-level guided/unguided branches
//! * [`losses`]: tempered softmax, KL regularizer, objectives
//! * [`training`]: SGD, plateau schedule, augmentation, two-stage trainer
//! * [`data`]: PPM images, manifests, synthetic hierarchical datasets
//! * [`eval`]: hierarchy-aware metrics and attention export
//! * [`cli`]: the `hse` command-line front end

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod losses;
pub mod model;
pub mod rng;
pub mod taxonomy;
pub mod tensor;
pub mod training;

pub use error::{HseError, Result};
