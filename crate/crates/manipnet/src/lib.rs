//! Learnable data manipulation for neural dialogue generation.
//!
//! The crate trains an encoder-decoder dialogue model while a second,
//! jointly-learned network reshapes every training batch: an instance filter
//! decides which samples to augment (word-level masked-LM substitution or
//! sentence-level round-trip translation, both relaxed with gumbel-softmax so
//! they stay differentiable), and an instance scorer assigns importance
//! weights to the enlarged batch. The manipulation parameters are updated by
//! meta-gradient descent: the gradient of the validation loss is pushed
//! through a one-step lookahead of the dialogue model back into the filter,
//! the augmenters and the scorer.
//!
//! Start with the runnable programs under `examples/`, or the `manipnet`
//! binary (`synth`, `train`, `eval`, `inspect`).

pub mod augment;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod weighting;

pub use error::{Error, Result};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
