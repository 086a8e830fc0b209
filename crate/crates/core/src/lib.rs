//! Emotion-sensitive spoken dialogue at desk scale.
//!
//! A speech encoder exposes every transformer layer; two independent
//! softmax-weighted layer sums produce a speech sequence and a pooled
//! emotion embedding. A connection module maps both into the embedding
//! space of a frozen causal decoder LM, which is trained in two stages
//! (speech recognition, then emotion-conditioned response generation).

pub mod connector;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod train;

pub use error::{CheckpointError, Error, Result};
