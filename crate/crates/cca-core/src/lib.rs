//! Multi-space attribute-specific image embedding in a single backbone.
//!
//! A small vision-transformer encoder produces a shared token representation;
//! its final layer swaps self-attention queries for condition-derived queries
//! (conditional cross-attention), so one set of weights yields a separate
//! embedding space per attribute. Training uses a margin triplet loss over
//! cosine distance with condition-matched negatives; evaluation is
//! attribute-wise retrieval mAP and triplet prediction accuracy.
//!
//! Everything runs on a self-contained dense-tensor engine with tape-based
//! reverse-mode autodiff ([`tape::Tape`]), so gradients are checkable against
//! finite differences end to end ([`gradcheck`]).

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod embedder;
pub mod error;
pub mod eval;
pub mod export;
pub mod gen;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod triplet;

pub use config::{EmbedType, EncoderConfig, TrainConfig};
pub use error::{Error, Result};
pub use tensor::{Precision, Tensor};
