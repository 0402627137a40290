//! Continual language learning for a frozen dual-encoder retrieval model.
//!
//! Only the token embedding table is trainable. Each new language grows the
//! vocabulary; new rows are initialised from the current embedding
//! distribution and updates are scaled per token by how many languages have
//! already used it.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod bpe;
pub mod config;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod matfile;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod report;
pub mod scalar;
pub mod seed;
pub mod vocab;

pub use error::{Error, ErrorClass, Result};
pub use scalar::Scalar;

pub type EmbeddingTableF32 = embedding::EmbeddingTable<f32>;
pub type EmbeddingTableF64 = embedding::EmbeddingTable<f64>;
pub type AnchorTableF32 = embedding::AnchorTable<f32>;
pub type AnchorTableF64 = embedding::AnchorTable<f64>;
pub type FrozenTextParamsF32 = encoder::FrozenTextParams<f32>;
pub type FrozenTextParamsF64 = encoder::FrozenTextParams<f64>;
pub type FeatureBatchF32 = objectives::FeatureBatch<f32>;
pub type FeatureBatchF64 = objectives::FeatureBatch<f64>;
pub type OptimStateF32 = optim::OptimState<f32>;
pub type OptimStateF64 = optim::OptimState<f64>;
