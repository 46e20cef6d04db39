//! Desk-scale retrieval-augmented language modeling.
//!
//! The crate covers the full pipeline: corpus tokenization and chunking, a
//! chunk retrieval database behind an IVF-PQ index with graph-routed centroid
//! search, a tape-based autodiff layer, a GPT decoder with gated chunk-wise
//! cross-attention over encoded neighbor chunks, the training pipelines
//! (pretrain, retro-fit, GPT-fit, instruction tuning), and a zero-shot RAG
//! evaluation harness.

pub mod check;
pub mod corpus;
pub mod evalgen;
pub mod io;
pub mod model;
pub mod numerics;
pub mod retrieval;
pub mod rng;
pub mod synth;
pub mod training;
