//! Structure-aware graph-text encoder with learnable alignment tokens,
//! conditioned through a frozen autoregressive decoder.
//!
//! The crate is organised bottom-up:
//!
//! - [`graphcore`]: attributed graphs, shortest paths, k-hop extraction and
//!   synthetic labelled-graph generators.
//! - [`tasktext`]: the closed vocabulary, prompt templates, the hashed text
//!   embedder and canonical graph descriptions.
//! - [`numerics`]: a small tape-based reverse-mode differentiation engine.
//! - [`structattn`]: cross-modal rotary positions, distance / edge / mask
//!   biases and the biased attention layer.
//! - [`encoder`]: input assembly, the adapter-augmented attention stack and
//!   the alignment-token read-out.
//! - [`decoder`]: the frozen causal decoder and the two training losses.
//! - [`trainer`]: multi-task instruction tuning over the trainable subset.
//! - [`evalharness`]: answer parsing, metrics and zero-shot evaluation.
//! - [`model`]: encoder, decoder and text resources over one parameter
//!   store.
//! - [`dataset`]: JSONL dataset records and the 8:1:1 split.
//! - [`checkpoint`]: the binary parameter container shared by both models.

pub mod checkpoint;
pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evalharness;
pub mod family;
pub mod graphcore;
pub mod instance;
pub mod model;
pub mod numerics;
pub mod seed;
pub mod structattn;
pub mod tasktext;
pub mod trainer;

pub use error::{Error, Result};
pub use family::TaskFamily;
pub use numerics::Real;
