//! Causal sequence block. The default variant gates attention pointwise with
//! SiLU and divides by a fixed length instead of normalizing with softmax.

use ndarray::{s, Array2, ArrayView2, Axis};

use super::layers::{layer_norm, layer_norm_backward, silu, silu_grad, LnCache};
use super::params::HstuParams;
use super::{cst, AttentionKind, Float};

#[derive(Debug, Clone)]
pub struct HstuCache<F> {
    ln_in: LnCache<F>,
    x_ln: Array2<F>,
    pre: Array2<F>,
    act: Array2<F>,
    scores: Vec<Array2<F>>,
    attn: Vec<Array2<F>>,
    ln_attn: LnCache<F>,
    normed: Array2<F>,
    gated: Array2<F>,
}

/// Static settings shared by every block of a model.
#[derive(Debug, Clone, Copy)]
pub struct HstuSpec {
    pub n_heads: usize,
    pub kind: AttentionKind,
    /// Divisor for the SiLU scores; the padded sequence length.
    pub norm_len: usize,
}

fn split<F: Float>(m: &Array2<F>, part: usize, d: usize) -> ArrayView2<'_, F> {
    m.slice(s![.., part * d..(part + 1) * d])
}

/// `x` holds the valid positions only, oldest first. Row `t` of the output
/// depends on rows `0..=t` of `x` and nothing else.
pub fn hstu_block_forward<F: Float>(
    x: ArrayView2<F>,
    p: &HstuParams<F>,
    spec: HstuSpec,
) -> (Array2<F>, HstuCache<F>) {
    let (n, d) = x.dim();
    let dh = d / spec.n_heads;
    let (x_ln, ln_in) = layer_norm(x, &p.ln_in);
    let pre = x_ln.dot(&p.w_uvqk) + &p.b_uvqk;
    let act = pre.mapv(silu);
    let (u, v, q, k) = (split(&act, 0, d), split(&act, 1, d), split(&act, 2, d), split(&act, 3, d));
    let inv_len = F::one() / cst::<F>(spec.norm_len as f64);
    let inv_sqrt = F::one() / cst::<F>(dh as f64).sqrt();
    let mut o = Array2::zeros((n, d));
    let mut all_scores = Vec::with_capacity(spec.n_heads);
    let mut all_attn = Vec::with_capacity(spec.n_heads);
    for h in 0..spec.n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let scores = q.slice(cols).dot(&k.slice(cols).t());
        let mut attn = Array2::zeros((n, n));
        for i in 0..n {
            match spec.kind {
                AttentionKind::Hstu => {
                    for j in 0..=i {
                        attn[[i, j]] = silu(scores[[i, j]]) * inv_len;
                    }
                }
                AttentionKind::Softmax => {
                    let m = (0..=i).fold(F::neg_infinity(), |a, j| a.max(scores[[i, j]] * inv_sqrt));
                    let mut z = F::zero();
                    for j in 0..=i {
                        let e = (scores[[i, j]] * inv_sqrt - m).exp();
                        attn[[i, j]] = e;
                        z += e;
                    }
                    for j in 0..=i {
                        attn[[i, j]] /= z;
                    }
                }
            }
        }
        o.slice_mut(cols).assign(&attn.dot(&v.slice(cols)));
        all_scores.push(scores);
        all_attn.push(attn);
    }
    let (normed, ln_attn) = layer_norm(o.view(), &p.ln_attn);
    let gated = &normed * &u;
    let out = x.to_owned() + gated.dot(&p.w_o) + &p.b_o;
    let cache = HstuCache {
        ln_in,
        x_ln,
        pre,
        act,
        scores: all_scores,
        attn: all_attn,
        ln_attn,
        normed,
        gated,
    };
    (out, cache)
}

/// Returns the gradient with respect to the block input.
pub fn hstu_block_backward<F: Float>(
    d_out: ArrayView2<F>,
    c: &HstuCache<F>,
    p: &HstuParams<F>,
    g: &mut HstuParams<F>,
    spec: HstuSpec,
) -> Array2<F> {
    let (n, d) = d_out.dim();
    let dh = d / spec.n_heads;
    g.w_o += &c.gated.t().dot(&d_out);
    g.b_o += &d_out.sum_axis(Axis(0));
    let d_gated = d_out.dot(&p.w_o.t());
    let mut d_act = Array2::zeros((n, 4 * d));
    d_act.slice_mut(s![.., 0..d]).assign(&(&d_gated * &c.normed));
    let d_normed = &d_gated * &split(&c.act, 0, d);
    let d_o = layer_norm_backward(d_normed.view(), &c.ln_attn, &p.ln_attn, &mut g.ln_attn);

    let (v, q, k) = (split(&c.act, 1, d), split(&c.act, 2, d), split(&c.act, 3, d));
    let inv_len = F::one() / cst::<F>(spec.norm_len as f64);
    let inv_sqrt = F::one() / cst::<F>(dh as f64).sqrt();
    for h in 0..spec.n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let attn = &c.attn[h];
        let scores = &c.scores[h];
        let d_oh = d_o.slice(cols);
        let d_attn = d_oh.dot(&v.slice(cols).t());
        let mut d_scores = Array2::zeros((n, n));
        for i in 0..n {
            match spec.kind {
                AttentionKind::Hstu => {
                    for j in 0..=i {
                        d_scores[[i, j]] = d_attn[[i, j]] * silu_grad(scores[[i, j]]) * inv_len;
                    }
                }
                AttentionKind::Softmax => {
                    let dot = (0..=i).fold(F::zero(), |a, j| a + d_attn[[i, j]] * attn[[i, j]]);
                    for j in 0..=i {
                        d_scores[[i, j]] = attn[[i, j]] * (d_attn[[i, j]] - dot) * inv_sqrt;
                    }
                }
            }
        }
        let vc = s![.., (d + h * dh)..(d + (h + 1) * dh)];
        let qc = s![.., (2 * d + h * dh)..(2 * d + (h + 1) * dh)];
        let kc = s![.., (3 * d + h * dh)..(3 * d + (h + 1) * dh)];
        d_act.slice_mut(vc).assign(&attn.t().dot(&d_oh));
        d_act.slice_mut(qc).assign(&d_scores.dot(&k.slice(cols)));
        d_act.slice_mut(kc).assign(&d_scores.t().dot(&q.slice(cols)));
    }
    let mut d_pre = d_act;
    d_pre.zip_mut_with(&c.pre, |dv, &z| *dv *= silu_grad(z));
    g.w_uvqk += &c.x_ln.t().dot(&d_pre);
    g.b_uvqk += &d_pre.sum_axis(Axis(0));
    let d_xln = d_pre.dot(&p.w_uvqk.t());
    let d_x = layer_norm_backward(d_xln.view(), &c.ln_in, &p.ln_in, &mut g.ln_in);
    d_x + d_out
}
