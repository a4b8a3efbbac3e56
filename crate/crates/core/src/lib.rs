//! Longitudinal report generation over patient study sequences.
//!
//! Each study's image is encoded into visual tokens, a group causal
//! transformer mixes tokens across a patient's chronologically ordered
//! studies, and a small decoder writes the report for each study while
//! a contrastive term aligns pooled visual and text embeddings.

pub mod alignment;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod synth;
pub mod temporal;
pub mod train;

pub use config::{AttnScale, ModelConfig};
pub use error::{Error, Result};
