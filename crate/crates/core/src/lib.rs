//! Cross-platform user identity linkage from check-in sequences.
//!
//! Two check-in sequences, one per platform, are embedded, encoded by a
//! temporal transformer, compared through a bidirectional cross-attention
//! stack whose attention maps pick the least-attended tokens to mask, encoded
//! again after masking, and scored by a pooled MLP with a sigmoid output.

pub mod autodiff;
pub mod config;
pub mod correlation;
pub mod data;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod head;
pub mod layers;
pub mod masking;
pub mod model;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
