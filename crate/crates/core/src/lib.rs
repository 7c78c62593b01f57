//! Listwise reranking with explicit list-view and point-view relevance.
//!
//! A small decoder-only transformer reads a query followed by a window of
//! candidate passages. Candidates are encoded in parallel (shared position
//! indices, no cross-candidate attention) and each ends with a `<doc_end>`
//! token whose state yields a point-view score. One identifier token per
//! slot sits after all candidates, sees every candidate, and yields a
//! list-view score. Training combines pairwise RankNet losses on both views
//! with a variance-gated calibration term that pulls list-view scores
//! toward the model's own point-view ordering across the whole batch.
//!
//! Modules, bottom up:
//! - [`engine`]: reverse-mode tensor autodiff and gradient checking
//! - [`layout`]: token sequence, positions and attention permissions
//! - [`model`]: transformer, score heads and checkpoints
//! - [`losses`]: pairwise ranking and calibration objectives
//! - [`trainer`]: batching, AdamW and the training loop
//! - [`inference`]: global-score and sliding-window reranking
//! - [`evalkit`]: NDCG, Kendall tau, TREC files, position-bias harness
//! - [`datagen`]: planted-relevance synthetic corpus and toy tokenizer

pub mod datagen;
pub mod engine;
pub mod evalkit;
pub mod inference;
pub mod layout;
pub mod losses;
pub mod model;
pub mod trainer;

mod error;

pub use error::{Error, Result};
