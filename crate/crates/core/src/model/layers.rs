//! Shared building blocks: LayerNorm, SiLU, softmax.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::params::LayerNormParams;
use super::{cst, Float};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LnCache<F> {
    pub xhat: Array2<F>,
    pub rstd: Array1<F>,
}

/// Row-wise LayerNorm with affine gain and bias.
pub fn layer_norm<F: Float>(x: ArrayView2<F>, p: &LayerNormParams<F>) -> (Array2<F>, LnCache<F>) {
    let d = cst::<F>(x.ncols() as f64);
    let eps = cst::<F>(LN_EPS);
    let mut xhat = x.to_owned();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.outer_iter_mut().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.dot(&row) / d;
        *r = F::one() / (var + eps).sqrt();
        let s = *r;
        row.mapv_inplace(|v| v * s);
    }
    let y = &xhat * &p.gain + &p.bias;
    (y, LnCache { xhat, rstd })
}

/// Returns dx; accumulates into the gain/bias gradients.
pub fn layer_norm_backward<F: Float>(
    dy: ArrayView2<F>,
    cache: &LnCache<F>,
    p: &LayerNormParams<F>,
    g: &mut LayerNormParams<F>,
) -> Array2<F> {
    g.gain += &(&dy * &cache.xhat).sum_axis(Axis(0));
    g.bias += &dy.sum_axis(Axis(0));
    let d = cst::<F>(dy.ncols() as f64);
    let mut dx = &dy * &p.gain;
    for ((mut row, xh), &r) in dx
        .outer_iter_mut()
        .zip(cache.xhat.outer_iter())
        .zip(cache.rstd.iter())
    {
        let mean_d = row.sum() / d;
        let mean_dx = row.dot(&xh) / d;
        row.zip_mut_with(&xh, |v, &h| *v = r * (*v - mean_d - h * mean_dx));
    }
    dx
}

#[inline]
pub fn sigmoid<F: Float>(z: F) -> F {
    F::one() / (F::one() + (-z).exp())
}

#[inline]
pub fn silu<F: Float>(z: F) -> F {
    z * sigmoid(z)
}

#[inline]
pub fn silu_grad<F: Float>(z: F) -> F {
    let s = sigmoid(z);
    s * (F::one() + z * (F::one() - s))
}

pub fn softmax<F: Float>(logits: ArrayView1<F>) -> Array1<F> {
    let m = logits.fold(F::neg_infinity(), |a, &b| a.max(b));
    let e = logits.mapv(|v| (v - m).exp());
    let s = e.sum();
    e / s
}

pub fn log_softmax<F: Float>(logits: ArrayView1<F>) -> Array1<F> {
    let m = logits.fold(F::neg_infinity(), |a, &b| a.max(b));
    let lse = logits.mapv(|v| (v - m).exp()).sum().ln() + m;
    logits.mapv(|v| v - lse)
}

/// Outer product `a ⊗ b` added into `acc`.
pub fn add_outer<F: Float>(acc: &mut Array2<F>, a: ArrayView1<F>, b: ArrayView1<F>) {
    for (mut row, &ai) in acc.outer_iter_mut().zip(a.iter()) {
        if ai != F::zero() {
            row.scaled_add(ai, &b);
        }
    }
}
