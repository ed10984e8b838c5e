//! Open-vocabulary relation classification over precomputed region embeddings.
//!
//! Relations are scored against a pack of raw/opposite text descriptions
//! ([`pack`], [`scoring`]); a small cross-attention adapter ([`adapter`])
//! turns a subject/object pair into one visual embedding and is trained with
//! a description-level regression loss ([`trainer`]). [`metrics`] computes
//! Recall@K and mean Recall@K for predicate classification, and [`dataio`]
//! reads, writes, and synthesizes the dataset fixtures everything runs on.

pub mod adapter;
pub mod checkpoint;
pub mod container;
pub mod dataio;
pub mod error;
pub mod metrics;
pub mod pack;
pub mod par;
pub mod rng;
pub mod scoring;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

/// Version string embedded in reports and checkpoints.
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");
