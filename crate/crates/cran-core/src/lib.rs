//! Multi-level cross-media alignment for image-text retrieval.
//!
//! The crate implements the full pipeline at desk scale: character-level
//! text encoders with attention pooling, relation-candidate construction
//! over image region features, three hinge alignment losses over sampled
//! triplets, fused dot-product similarity, and a bidirectional Recall@K
//! evaluator — all on top of a minimal reverse-mode autodiff tape.

pub mod alignment;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod params;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
