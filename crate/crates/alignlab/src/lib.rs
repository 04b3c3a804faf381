//! Measure how well text corpora line up with each other and how that
//! alignment shapes language-model training outcomes.
//!
//! The crate embeds token batches as the diagonal of a probe model's Fisher
//! information matrix, scores corpus pairs with a Monte Carlo alignment
//! coefficient, runs controlled pre-training/fine-tuning experiments with a
//! small built-in transformer, and fits the alignment-versus-loss
//! relationship. Everything is seeded and deterministic: the same manifest
//! and seed reproduce a report bundle byte for byte.

pub mod batch;
pub mod corpus;
pub mod lm;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
