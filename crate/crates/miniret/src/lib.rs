//! Desk-scale dense retriever training.
//!
//! The crate covers the full loop for training small dense retrievers on
//! LLM-augmented data: a minimal reverse-mode autodiff engine, a tiny
//! decoder-style transformer with switchable attention direction and
//! pooling, InfoNCE contrastive training with Matryoshka embeddings,
//! structured pruning with hard-concrete masks and Lagrangian constraints,
//! corpus augmentation pipelines (sentence cropping, synthetic queries,
//! listwise rerank refinement, synthetic triplets), exact cosine top-k
//! search, and nDCG@10 evaluation with a synthetic needle-retrieval
//! harness.
//!
//! Start from the `examples/` directory: there is one runnable example per
//! major capability. The `miniret` binary wires the same pipelines behind
//! subcommands.

pub mod augment;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evalrun;
pub mod gradcheck;
pub mod index;
pub mod llm;
pub mod metrics;
pub mod needle;
pub mod objective;
pub mod pruning;
pub mod rng;
pub mod synthcorpus;
pub mod tape;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use tensor::Tensor;
