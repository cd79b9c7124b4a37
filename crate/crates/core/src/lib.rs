//! Retrieval-augmented prompt OOD detection over precomputed embeddings.
//!
//! The pipeline runs entirely in embedding space:
//!
//! 1. [`mining`] picks valuable ID and outlier crops from training images.
//! 2. [`retrieval`] ranks a vocabulary by joint similarity and keeps the top
//!    words as OOD prompts.
//! 3. [`detector`] scores test samples with a grouped prompt ensemble.
//! 4. [`adapt`] grows the OOD prompt bank from confidently detected test
//!    OOD samples while the stream is processed.
//! 5. [`eval`] computes AUROC / FPR95 and generates synthetic benchmarks.
//!
//! [`pipeline`] composes the stages behind one [`config::RunConfig`].

pub mod adapt;
pub mod config;
pub mod corpus;
pub mod detector;
pub mod eval;
pub mod exec;
pub mod mining;
pub mod pipeline;
pub mod retrieval;
pub mod vecops;

/// Version string embedded in every artifact.
pub const TOOL_VERSION: &str = concat!("rap ", env!("CARGO_PKG_VERSION"));
