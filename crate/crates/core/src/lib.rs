//! Multi-modal product matching.
//!
//! Offers from different shops ("domains") are embedded by a late-fusion
//! encoder (pooled image embedding, text embedding and a few numerical
//! features, projected by a small trained head onto the unit sphere), matched
//! by brand-blocked exact cosine kNN, evaluated with R@k / AUCPR, and routed
//! through human validation whose output precision is predicted from the
//! validators' positive likelihood ratio.

pub mod config;
pub mod domain;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod hitl;
pub mod pipeline;
pub mod retrieval;
pub mod server;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
