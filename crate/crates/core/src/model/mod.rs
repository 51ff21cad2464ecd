//! HSTU + sparse-MoE sequence encoder with ItemDNN inputs, two semantic-ID
//! heads and a cosine embedding head.
//!
//! Everything is generic over [`Float`] so the same code trains in `f32` and
//! gradient-checks in `f64`. Backward passes are written by hand next to
//! their forward passes.

pub mod checkpoint;
pub mod encoder;
pub mod heads;
pub mod hstu;
pub mod item_dnn;
pub mod layers;
pub mod moe;
pub mod params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use encoder::{encode_sequence, encode_with_routing, EncoderCache, Model, RowRouting};
pub use moe::{gini, MoeStats};
pub use params::Params;

pub trait Float:
    ndarray::NdFloat + num_traits::FromPrimitive + std::iter::Sum + Default + 'static
{
}
impl Float for f32 {}
impl Float for f64 {}

#[inline]
pub fn cst<F: Float>(x: f64) -> F {
    F::from_f64(x).expect("finite constant")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// SiLU-gated pointwise attention without softmax.
    #[default]
    Hstu,
    /// Causal softmax attention, for ablations.
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeConfig {
    pub n_experts: usize,
    pub top_k: usize,
    pub expert_hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Codebook size of each SID level.
    pub codebook_size: usize,
    pub l_max: usize,
    pub moe: MoeConfig,
    pub use_moe: bool,
    pub attention: AttentionKind,
    pub temperature: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Weight of the auxiliary expert-balance loss; 0 means monitor only.
    pub balance_loss_weight: f64,
    /// Rows of the item-id embedding table, including the padding row.
    pub vocab_size: usize,
    /// Width of the per-item feature vector (static, time and hot features).
    pub feature_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let hidden_dim = 32;
        Self {
            hidden_dim,
            n_heads: 4,
            n_layers: 2,
            codebook_size: 256,
            l_max: 20,
            moe: MoeConfig {
                n_experts: 8,
                top_k: 2,
                expert_hidden: 4 * hidden_dim,
            },
            use_moe: true,
            attention: AttentionKind::Hstu,
            temperature: 0.02,
            lambda1: 1.0,
            lambda2: 1.0,
            balance_loss_weight: 0.0,
            vocab_size: 0,
            feature_dim: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if self.hidden_dim == 0 || self.n_heads == 0 || !self.hidden_dim.is_multiple_of(self.n_heads) {
            return bad("hidden_dim must be a positive multiple of n_heads");
        }
        if self.codebook_size < 2 {
            return bad("codebook_size must be at least 2");
        }
        if self.l_max == 0 {
            return bad("l_max must be positive");
        }
        if self.use_moe && (self.moe.top_k == 0 || self.moe.top_k > self.moe.n_experts) {
            return bad("moe.top_k must lie in [1, n_experts]");
        }
        if self.use_moe && self.moe.expert_hidden == 0 {
            return bad("moe.expert_hidden must be positive");
        }
        if self.temperature <= 0.0 || !self.temperature.is_finite() {
            return bad("temperature must be positive");
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.balance_loss_weight < 0.0 {
            return bad("loss weights must be non-negative");
        }
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    pub fn item_input_dim(&self) -> usize {
        self.hidden_dim + self.feature_dim
    }
}
