//! Joint loss and gradient for one batch.
//!
//! Rows are encoded in parallel. Row gradients are summed inside a fixed
//! number of contiguous chunks and the chunk sums are added in chunk order,
//! so the result does not depend on how many threads run the chunks.

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;

use super::loss::{infonce_logq_loss, sid_ce_losses, total_loss, LossBreakdown};
use super::popularity::PopularityTable;
use crate::data::{pad_truncate, ItemId, PaddedRow, UserSequence};
use crate::error::{Error, Result};
use crate::model::encoder::encoder_backward;
use crate::model::heads::{decode_sid1_logits, decode_sid2_logits_batch, sid1_backward, sid2_backward, Sid1Cache};
use crate::model::item_dnn::{item_dnn_tokens, item_dnn_tokens_backward};
use crate::model::{cst, encode_with_routing, EncoderCache, Float, Model, MoeStats, Params, RowRouting};
use crate::tokenizer::{AssignmentTable, SemanticId};

/// A padded history with its next item, that item's SID and `log Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub row: PaddedRow,
    pub target: ItemId,
    pub sid: SemanticId,
    pub log_q: f64,
}

pub fn build_examples(
    sequences: &[UserSequence],
    l_max: usize,
    pad_id: ItemId,
    table: &AssignmentTable,
    popularity: &PopularityTable,
) -> Result<Vec<Example>> {
    sequences
        .iter()
        .filter(|s| !s.history.is_empty())
        .filter_map(|s| s.target.map(|t| (s, t)))
        .map(|(s, target)| {
            let sid = table
                .get(target)
                .ok_or_else(|| Error::invalid(format!("target item {target} has no semantic id")))?;
            Ok(Example {
                row: pad_truncate(s, l_max, pad_id)?,
                target,
                sid,
                log_q: popularity.log_q(target)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct BatchResult<F> {
    pub breakdown: LossBreakdown,
    pub grads: Option<Params<F>>,
    pub stats: MoeStats,
    /// Expert choices per row, reusable to hold routing fixed.
    pub routing: Vec<RowRouting>,
}

impl<F> BatchResult<F> {
    /// The optimized scalar: joint loss plus the balance term.
    pub fn objective(&self) -> f64 {
        self.breakdown.l_total + self.breakdown.aux
    }
}

struct RowForward<F> {
    enc: EncoderCache<F>,
    logits1: Array1<F>,
    sid1: Sid1Cache<F>,
}

fn row_forward<F: Float>(model: &Model<F>, ex: &Example, routing: Option<&RowRouting>) -> Result<RowForward<F>> {
    let enc = encode_with_routing(&ex.row, model, routing)?;
    let (logits1, sid1) = decode_sid1_logits(enc.h.view(), &model.params.sid1);
    Ok(RowForward { enc, logits1, sid1 })
}

/// Balance-loss value and per-layer `∂L/∂p_j` for every token's gate softmax.
fn balance_terms<F: Float>(model: &Model<F>, rows: &[RowForward<F>]) -> (f64, Vec<Vec<F>>) {
    let cfg = &model.config;
    let w = cfg.balance_loss_weight;
    if !cfg.use_moe || w == 0.0 || cfg.n_layers == 0 {
        return (0.0, Vec::new());
    }
    let e = cfg.moe.n_experts;
    let mut aux = 0.0;
    let mut coefs = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let mut counts = vec![0f64; e];
        let mut prob_sum = vec![0f64; e];
        let mut tokens = 0usize;
        for r in rows {
            for (c, &u) in counts.iter_mut().zip(&r.enc.usage[l]) {
                *c += u as f64;
            }
            if let Some(p) = r.enc.gate_probs()[l] {
                tokens += p.nrows();
                for (s, v) in prob_sum.iter_mut().zip(p.sum_axis(Axis(0)).iter()) {
                    *s += v.to_f64().unwrap_or(f64::NAN);
                }
            }
        }
        let t = tokens as f64;
        let routed = t * cfg.moe.top_k as f64;
        let f: Vec<f64> = counts.iter().map(|c| c / routed).collect();
        aux += w * e as f64 * f.iter().zip(&prob_sum).map(|(fj, pj)| fj * pj / t).sum::<f64>();
        coefs.push(f.iter().map(|fj| cst::<F>(w * e as f64 * fj / t)).collect());
    }
    (aux, coefs)
}

/// Forward pass over a batch; with `want_grads`, also the gradient of
/// `l_total + aux` with respect to every parameter.
pub fn batch_step<F: Float>(
    model: &Model<F>,
    batch: &[&Example],
    routing: Option<&[RowRouting]>,
    want_grads: bool,
    chunks: usize,
) -> Result<BatchResult<F>> {
    let cfg = &model.config;
    let p = &model.params;
    let b = batch.len();
    if b == 0 {
        return Err(Error::Empty("empty batch"));
    }
    if routing.is_some_and(|r| r.len() != b) {
        return Err(Error::Shape("routing must cover every row".into()));
    }
    let rows: Vec<RowForward<F>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| row_forward(model, ex, routing.map(|r| &r[i])))
        .collect::<Result<_>>()?;

    let d = cfg.hidden_dim;
    let k = cfg.codebook_size;
    let mut h_t = Array2::zeros((b, d));
    let mut logits1 = Array2::zeros((b, k));
    for (i, r) in rows.iter().enumerate() {
        h_t.row_mut(i).assign(&r.enc.h_t);
        logits1.row_mut(i).assign(&r.logits1);
    }
    let targets: Vec<ItemId> = batch.iter().map(|e| e.target).collect();
    let tokens: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::invalid(format!("target {bad} outside vocabulary")));
    }
    let (e_raw, e_cache) = item_dnn_tokens(&tokens, p, &model.features);
    let log_q: Vec<f64> = batch.iter().map(|e| e.log_q).collect();
    let con = infonce_logq_loss(h_t.view(), e_raw.view(), &targets, &log_q, cfg.temperature)?;
    let c1: Vec<usize> = batch.iter().map(|e| e.sid.c1 as usize).collect();
    let c2: Vec<usize> = batch.iter().map(|e| e.sid.c2 as usize).collect();
    let (logits2, sid2_cache) = decode_sid2_logits_batch(h_t.view(), &c1, &p.sid2)?;
    let ce = sid_ce_losses(logits1.view(), logits2.view(), &c1, &c2)?;
    let (aux, balance) = balance_terms(model, &rows);

    let mut stats = MoeStats::default();
    for r in &rows {
        stats.merge(&MoeStats {
            usage_counts: r.enc.usage.clone(),
        });
    }
    let breakdown = LossBreakdown {
        l_con: con.loss,
        l_c1: ce.l_c1,
        l_c2: ce.l_c2,
        l_total: total_loss(con.loss, ce.l_c1, ce.l_c2, cfg.lambda1, cfg.lambda2),
        aux,
        hitrate: con.hitrate,
        ndcg: con.ndcg,
    };
    let routing_used: Vec<RowRouting> = rows.iter().map(|r| r.enc.routing.clone()).collect();
    if !want_grads {
        return Ok(BatchResult {
            breakdown,
            grads: None,
            stats,
            routing: routing_used,
        });
    }

    let mut grads = Params::<F>::zeros(cfg);
    let mut d_ht = con.d_h;
    if cfg.lambda2 != 0.0 {
        let d2 = ce.d_logits2 * cst::<F>(cfg.lambda2);
        d_ht += &sid2_backward(d2.view(), &sid2_cache, &p.sid2, &mut grads.sid2);
    }
    item_dnn_tokens_backward(&con.d_e, &e_cache, &tokens, p, &mut grads);
    let d_logits1 = ce.d_logits1 * cst::<F>(cfg.lambda1);

    let n_chunks = chunks.clamp(1, b);
    let bounds: Vec<(usize, usize)> = (0..n_chunks).map(|c| (c * b / n_chunks, (c + 1) * b / n_chunks)).collect();
    let partials: Vec<Params<F>> = bounds
        .par_iter()
        .map(|&(lo, hi)| {
            let mut local = Params::<F>::zeros(cfg);
            for (i, r) in rows.iter().enumerate().take(hi).skip(lo) {
                let n = r.enc.h.nrows();
                let mut d_h = Array2::zeros((n, d));
                if cfg.lambda1 != 0.0 {
                    d_h += &sid1_backward(d_logits1.row(i), r.enc.h.view(), &r.sid1, &p.sid1, &mut local.sid1);
                }
                let mut last = d_h.row_mut(n - 1);
                last += &d_ht.row(i);
                encoder_backward(d_h, &r.enc, model, &balance, &mut local);
            }
            local
        })
        .collect();
    for part in &partials {
        grads.add_assign(part);
    }
    Ok(BatchResult {
        breakdown,
        grads: Some(grads),
        stats,
        routing: routing_used,
    })
}
