//! Multi-modal lifelong user-interest modeling.
//!
//! The crate covers the whole offline pipeline: residual quantization of item
//! embeddings into hierarchical semantic IDs, similarity bucketization,
//! soft (dense top-K) and hard (inverted-index) behavior retrieval, a
//! target-attention ranker with hand-derived gradients, and the
//! information-theoretic analyses used to inspect what the ranker learned.

pub mod analysis;
pub mod data;
pub mod error;
pub mod esu;
pub mod experiment;
pub mod gsu;
pub mod kmeans;
pub mod quantizer;
pub mod similarity;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
