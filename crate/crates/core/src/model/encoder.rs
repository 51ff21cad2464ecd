//! The full sequence encoder: item tower, positional embedding, stacked
//! blocks and a final LayerNorm.

use ndarray::{s, Array1, Array2, Axis};

use super::hstu::{hstu_block_backward, hstu_block_forward, HstuCache, HstuSpec};
use super::item_dnn::{item_dnn_tokens, item_dnn_tokens_backward, FeatureTable, ItemDnnCache};
use super::layers::{layer_norm, layer_norm_backward, LnCache};
use super::moe::{moe_layer_backward, moe_layer_forward, MoeLayerCache};
use super::params::Params;
use super::{Float, ModelConfig};
use crate::data::PaddedRow;
use crate::error::{Error, Result};

/// Expert choices for one sequence, indexed `[layer][token][slot]`.
pub type RowRouting = Vec<Vec<Vec<usize>>>;

#[derive(Debug, Clone)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub params: Params<F>,
    pub features: FeatureTable<F>,
}

impl<F: Float> Model<F> {
    pub fn new(config: ModelConfig, params: Params<F>, features: FeatureTable<F>) -> Result<Self> {
        config.validate()?;
        if features.rows.nrows() != config.vocab_size || features.dim() != config.feature_dim {
            return Err(Error::Shape(format!(
                "feature table is {:?}, config wants [{} x {}]",
                features.rows.dim(),
                config.vocab_size,
                config.feature_dim
            )));
        }
        Ok(Self {
            config,
            params,
            features,
        })
    }

    pub fn cast<G: Float>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(&self.config),
            features: self.features.cast(),
        }
    }

    fn spec(&self) -> HstuSpec {
        HstuSpec {
            n_heads: self.config.n_heads,
            kind: self.config.attention,
            norm_len: self.config.l_max,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderCache<F> {
    tokens: Vec<usize>,
    slots: Vec<usize>,
    item: ItemDnnCache<F>,
    blocks: Vec<(HstuCache<F>, Option<MoeLayerCache<F>>)>,
    final_ln: LnCache<F>,
    /// Encoder output over the valid positions, oldest first.
    pub h: Array2<F>,
    pub h_t: Array1<F>,
    /// Routed-token counts per layer for this sequence.
    pub usage: Vec<Vec<u64>>,
    pub routing: RowRouting,
    l_max: usize,
}

impl<F: Float> EncoderCache<F> {
    /// `H` over all `L_max` slots; padded slots are zero rows.
    pub fn h_padded(&self) -> Array2<F> {
        let mut out = Array2::zeros((self.l_max, self.h.ncols()));
        out.slice_mut(s![self.l_max - self.h.nrows().., ..]).assign(&self.h);
        out
    }

    /// Full gate softmax per MoE layer, `[tokens × n_experts]`.
    pub fn gate_probs(&self) -> Vec<Option<&Array2<F>>> {
        self.blocks
            .iter()
            .map(|(_, m)| m.as_ref().map(|m| &m.mixture.probs))
            .collect()
    }
}

pub fn encode_sequence<F: Float>(row: &PaddedRow, model: &Model<F>) -> Result<EncoderCache<F>> {
    encode_with_routing(row, model, None)
}

/// Forward pass over the valid tokens of `row`. With `routing`, the MoE
/// layers use the given expert choices instead of the gate's top-k.
pub fn encode_with_routing<F: Float>(
    row: &PaddedRow,
    model: &Model<F>,
    routing: Option<&RowRouting>,
) -> Result<EncoderCache<F>> {
    let cfg = &model.config;
    let p = &model.params;
    if row.token_ids.len() != cfg.l_max || row.valid_mask.len() != cfg.l_max {
        return Err(Error::Shape(format!("row length {} != l_max {}", row.token_ids.len(), cfg.l_max)));
    }
    let mut tokens = Vec::new();
    let mut slots = Vec::new();
    for (slot, (&t, &v)) in row.token_ids.iter().zip(&row.valid_mask).enumerate() {
        if v {
            if t as usize >= cfg.vocab_size {
                return Err(Error::invalid(format!("item id {t} outside vocabulary of {}", cfg.vocab_size)));
            }
            tokens.push(t as usize);
            slots.push(slot);
        }
    }
    if tokens.is_empty() {
        return Err(Error::Empty("sequence has no valid tokens"));
    }
    let (emb, item) = item_dnn_tokens(&tokens, p, &model.features);
    let mut x = emb + p.pos_emb.select(Axis(0), &slots);
    let spec = model.spec();
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    let mut usage = Vec::new();
    let mut used_routing = Vec::new();
    for (li, layer) in p.layers.iter().enumerate() {
        let (y, hc) = hstu_block_forward(x.view(), &layer.hstu, spec);
        x = y;
        let mc = match &layer.moe {
            Some(mp) => {
                let r = routing.map(|r| r[li].as_slice());
                let (y, mc) = moe_layer_forward(x.view(), mp, cfg.moe.top_k, r);
                x = y;
                usage.push(mc.mixture.usage(mp.experts.len()));
                used_routing.push(mc.mixture.routes.clone());
                Some(mc)
            }
            None => None,
        };
        blocks.push((hc, mc));
    }
    let (h, final_ln) = layer_norm(x.view(), &p.final_ln);
    let h_t = h.row(h.nrows() - 1).to_owned();
    Ok(EncoderCache {
        tokens,
        slots,
        item,
        blocks,
        final_ln,
        h,
        h_t,
        usage,
        routing: used_routing,
        l_max: cfg.l_max,
    })
}

/// Accumulates parameter gradients given `∂L/∂H` over the valid rows.
/// `balance[l]` is `∂L/∂p_j` for the gate softmax of MoE layer `l` (empty
/// when the balance loss is off).
pub fn encoder_backward<F: Float>(
    d_h: Array2<F>,
    cache: &EncoderCache<F>,
    model: &Model<F>,
    balance: &[Vec<F>],
    grads: &mut Params<F>,
) {
    let p = &model.params;
    let spec = model.spec();
    let mut dx = layer_norm_backward(d_h.view(), &cache.final_ln, &p.final_ln, &mut grads.final_ln);
    let mut moe_idx = cache.usage.len();
    for (li, (hc, mc)) in cache.blocks.iter().enumerate().rev() {
        let layer = &p.layers[li];
        let g = &mut grads.layers[li];
        if let (Some(mc), Some(mp), Some(gm)) = (mc, &layer.moe, g.moe.as_mut()) {
            moe_idx -= 1;
            let bal = balance.get(moe_idx).map(|b| b.as_slice()).unwrap_or(&[]);
            dx = moe_layer_backward(dx.view(), mc, mp, gm, bal);
        }
        dx = hstu_block_backward(dx.view(), hc, &layer.hstu, &mut g.hstu, spec);
    }
    for (row, &slot) in dx.outer_iter().zip(&cache.slots) {
        let mut target = grads.pos_emb.row_mut(slot);
        target += &row;
    }
    item_dnn_tokens_backward(&dx, &cache.item, &cache.tokens, p, grads);
}
