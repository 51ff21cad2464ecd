//! Generative retrieval over two-level semantic IDs with an embedding
//! re-ranking cascade.
//!
//! * [`data`] ingests catalogs and sequences and generates synthetic ones.
//! * [`tokenizer`] builds semantic IDs by residual K-means and resolves
//!   collisions.
//! * [`model`] is the HSTU + MoE encoder with its SID and embedding heads.
//! * [`training`] optimises the joint contrastive + SID objective.
//! * [`inference`] runs beam search, index expansion and cosine re-ranking.
//! * [`eval`] holds ranking metrics, split evaluation and scaling-law fits.

pub mod binio;
pub mod data;
pub mod error;
pub mod eval;
pub mod inference;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
