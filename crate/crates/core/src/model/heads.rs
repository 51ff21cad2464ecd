//! Semantic-ID decoder heads.

use ndarray::{concatenate, Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::layers::{add_outer, silu, silu_grad, softmax};
use super::params::{Sid1Params, Sid2Params};
use super::{cst, Float};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Sid1Cache<F> {
    pub query: Array1<F>,
    keys: Array2<F>,
    values: Array2<F>,
    /// Attention weights over the valid positions; they sum to one.
    pub weights: Array1<F>,
    context: Array1<F>,
}

/// Cross-attention from the last row of `h` over all rows of `h`, then a
/// projection to codebook logits. `h` holds valid positions only.
pub fn decode_sid1_logits<F: Float>(h: ArrayView2<F>, p: &Sid1Params<F>) -> (Array1<F>, Sid1Cache<F>) {
    let n = h.nrows();
    let h_t = h.row(n - 1);
    let query = h_t.dot(&p.w_q);
    let keys = h.dot(&p.w_k);
    let values = h.dot(&p.w_v);
    let scale = F::one() / cst::<F>(h.ncols() as f64).sqrt();
    let weights = softmax((keys.dot(&query) * scale).view());
    let context = values.t().dot(&weights);
    let logits = context.dot(&p.w_proj) + &p.b_proj;
    (
        logits,
        Sid1Cache {
            query,
            keys,
            values,
            weights,
            context,
        },
    )
}

/// Returns `∂L/∂h` for all rows (the query path lands on the last row).
pub fn sid1_backward<F: Float>(
    d_logits: ArrayView1<F>,
    h: ArrayView2<F>,
    c: &Sid1Cache<F>,
    p: &Sid1Params<F>,
    g: &mut Sid1Params<F>,
) -> Array2<F> {
    let n = h.nrows();
    let scale = F::one() / cst::<F>(h.ncols() as f64).sqrt();
    add_outer(&mut g.w_proj, c.context.view(), d_logits);
    g.b_proj += &d_logits;
    let d_ctx = p.w_proj.dot(&d_logits);
    let d_w = c.values.dot(&d_ctx);
    let dot = d_w.dot(&c.weights);
    let d_s = (&d_w - dot) * &c.weights * scale;
    let mut d_values = Array2::zeros(c.values.dim());
    for (mut row, &a) in d_values.outer_iter_mut().zip(c.weights.iter()) {
        row.assign(&(&d_ctx * a));
    }
    let d_query = c.keys.t().dot(&d_s);
    let mut d_keys = Array2::zeros(c.keys.dim());
    for (mut row, &s) in d_keys.outer_iter_mut().zip(d_s.iter()) {
        row.assign(&(&c.query * s));
    }
    g.w_k += &h.t().dot(&d_keys);
    g.w_v += &h.t().dot(&d_values);
    add_outer(&mut g.w_q, h.row(n - 1), d_query.view());
    let mut dh = d_keys.dot(&p.w_k.t()) + d_values.dot(&p.w_v.t());
    let mut last = dh.row_mut(n - 1);
    last += &p.w_q.dot(&d_query);
    dh
}

#[derive(Debug, Clone)]
pub struct Sid2Cache<F> {
    codes: Vec<usize>,
    input: Array2<F>,
    pre: Array2<F>,
    hidden: Array2<F>,
    query: Array2<F>,
}

fn check_codes(codes: &[usize], k: usize) -> Result<()> {
    match codes.iter().find(|&&c| c >= k) {
        Some(&c) => Err(Error::CodeOutOfRange { code: c, k }),
        None => Ok(()),
    }
}

/// Level-2 logits for each `(h_rows[i], codes[i])` pair:
/// `q₂ = MLP([h; E(c1)])`, logits = projection of `q₂`.
pub fn decode_sid2_logits_batch<F: Float>(
    h_rows: ArrayView2<F>,
    codes: &[usize],
    p: &Sid2Params<F>,
) -> Result<(Array2<F>, Sid2Cache<F>)> {
    check_codes(codes, p.code_emb.nrows())?;
    let emb = p.code_emb.select(Axis(0), codes);
    let input = concatenate(Axis(1), &[h_rows, emb.view()]).map_err(|e| Error::Shape(e.to_string()))?;
    let pre = input.dot(&p.w_a) + &p.b_a;
    let hidden = pre.mapv(silu);
    let query = hidden.dot(&p.w_b) + &p.b_b;
    let logits = query.dot(&p.w_proj) + &p.b_proj;
    Ok((
        logits,
        Sid2Cache {
            codes: codes.to_vec(),
            input,
            pre,
            hidden,
            query,
        },
    ))
}

/// Single-query form of [`decode_sid2_logits_batch`].
pub fn decode_sid2_logits<F: Float>(h_t: ArrayView1<F>, c1: usize, p: &Sid2Params<F>) -> Result<Array1<F>> {
    let rows = h_t.insert_axis(Axis(0));
    let (logits, _) = decode_sid2_logits_batch(rows, &[c1], p)?;
    Ok(logits.row(0).to_owned())
}

/// Returns `∂L/∂h_rows`.
pub fn sid2_backward<F: Float>(
    d_logits: ArrayView2<F>,
    c: &Sid2Cache<F>,
    p: &Sid2Params<F>,
    g: &mut Sid2Params<F>,
) -> Array2<F> {
    let d = p.code_emb.ncols();
    g.w_proj += &c.query.t().dot(&d_logits);
    g.b_proj += &d_logits.sum_axis(Axis(0));
    let d_query = d_logits.dot(&p.w_proj.t());
    g.w_b += &c.hidden.t().dot(&d_query);
    g.b_b += &d_query.sum_axis(Axis(0));
    let mut d_pre = d_query.dot(&p.w_b.t());
    d_pre.zip_mut_with(&c.pre, |v, &z| *v *= silu_grad(z));
    g.w_a += &c.input.t().dot(&d_pre);
    g.b_a += &d_pre.sum_axis(Axis(0));
    let d_input = d_pre.dot(&p.w_a.t());
    for (row, &code) in d_input.outer_iter().zip(&c.codes) {
        let mut target = g.code_emb.row_mut(code);
        target += &row.slice(ndarray::s![d..]);
    }
    d_input.slice(ndarray::s![.., ..d]).to_owned()
}
