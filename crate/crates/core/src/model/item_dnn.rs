//! Item tower. The nonlinear path feeds the encoder; the linear path lets
//! raw feature signals reach the cosine index unchanged.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, Axis};

use super::params::{ItemDnnParams, Params};
use super::{cst, Float};
use crate::data::{ItemCatalog, ItemId};

/// Non-trainable per-item features indexed by vocabulary row:
/// static features, then time features, then a hotness feature.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable<F> {
    pub rows: Array2<F>,
}

impl<F: Float> FeatureTable<F> {
    /// Builds rows `0..vocab_size`; ids missing from the catalog (and the
    /// padding row) stay zero. The hot feature is `ln(1+count)` scaled to
    /// [0, 1] by the catalog maximum.
    pub fn from_catalog(catalog: &ItemCatalog, vocab_size: usize) -> Self {
        let sdim = catalog.static_dim();
        let max_log = catalog
            .items
            .iter()
            .map(|i| (i.popularity_count as f64).ln_1p())
            .fold(0.0, f64::max);
        let mut rows = Array2::zeros((vocab_size, sdim + 1));
        for item in &catalog.items {
            let r = item.item_id as usize;
            if r >= vocab_size {
                continue;
            }
            for (j, &v) in item.static_features.iter().take(sdim).enumerate() {
                rows[[r, j]] = cst(v as f64);
            }
            let hot = if max_log > 0.0 {
                (item.popularity_count as f64).ln_1p() / max_log
            } else {
                0.0
            };
            rows[[r, sdim]] = cst(hot);
        }
        Self { rows }
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn cast<G: Float>(&self) -> FeatureTable<G> {
        FeatureTable {
            rows: self.rows.mapv(|v| G::from_f64(v.to_f64().unwrap_or(0.0)).unwrap_or(G::zero())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ItemDnnCache<F> {
    input: Array2<F>,
    pre_relu: Array2<F>,
    summed: Array2<F>,
}

/// Dual-path transform of already-concatenated inputs `[n × din]`.
pub fn item_dnn_apply<F: Float>(input: Array2<F>, p: &ItemDnnParams<F>) -> (Array2<F>, ItemDnnCache<F>) {
    let pre_relu = input.dot(&p.w_a) + &p.b_a;
    let summed = pre_relu.mapv(|v| v.max(F::zero())) + input.dot(&p.w_b);
    let out = summed.dot(&p.w_out) + &p.b_out;
    (
        out,
        ItemDnnCache {
            input,
            pre_relu,
            summed,
        },
    )
}

/// Item embeddings for vocabulary rows `tokens`: concatenates the id
/// embedding with the feature row and applies the dual-path MLP.
pub fn item_dnn_tokens<F: Float>(
    tokens: &[usize],
    params: &Params<F>,
    features: &FeatureTable<F>,
) -> (Array2<F>, ItemDnnCache<F>) {
    let ids = params.item_emb.select(Axis(0), tokens);
    let feats = features.rows.select(Axis(0), tokens);
    let input = concatenate(Axis(1), &[ids.view(), feats.view()]).expect("row counts agree");
    item_dnn_apply(input, &params.item_dnn)
}

/// Single-item form: `[id_embedding; static; time; hot]` through the tower.
pub fn item_dnn_forward<F: Float>(
    static_features: ArrayView1<F>,
    time_features: ArrayView1<F>,
    hot_features: ArrayView1<F>,
    id_embedding: ArrayView1<F>,
    p: &ItemDnnParams<F>,
) -> Array1<F> {
    let input = concatenate(
        Axis(0),
        &[id_embedding, static_features, time_features, hot_features],
    )
    .expect("1-d concat");
    let n = input.len();
    let (out, _) = item_dnn_apply(input.into_shape_with_order((1, n)).expect("reshape"), p);
    out.row(0).to_owned()
}

/// Returns the gradient with respect to the concatenated input.
pub fn item_dnn_backward<F: Float>(
    d_out: &Array2<F>,
    cache: &ItemDnnCache<F>,
    p: &ItemDnnParams<F>,
    g: &mut ItemDnnParams<F>,
) -> Array2<F> {
    g.w_out += &cache.summed.t().dot(d_out);
    g.b_out += &d_out.sum_axis(Axis(0));
    let d_sum = d_out.dot(&p.w_out.t());
    let mut d_pre = d_sum.clone();
    d_pre.zip_mut_with(&cache.pre_relu, |d, &z| {
        if z <= F::zero() {
            *d = F::zero();
        }
    });
    g.w_a += &cache.input.t().dot(&d_pre);
    g.b_a += &d_pre.sum_axis(Axis(0));
    g.w_b += &cache.input.t().dot(&d_sum);
    d_pre.dot(&p.w_a.t()) + d_sum.dot(&p.w_b.t())
}

/// Backward for [`item_dnn_tokens`], scattering into the id-embedding rows.
pub fn item_dnn_tokens_backward<F: Float>(
    d_out: &Array2<F>,
    cache: &ItemDnnCache<F>,
    tokens: &[usize],
    params: &Params<F>,
    grads: &mut Params<F>,
) {
    let d_in = item_dnn_backward(d_out, cache, &params.item_dnn, &mut grads.item_dnn);
    let d = params.item_emb.ncols();
    for (row, &t) in d_in.outer_iter().zip(tokens) {
        let mut target = grads.item_emb.row_mut(t);
        target += &row.slice(s![..d]);
    }
}

/// L2-normalized item embeddings for scoring and index building.
pub fn item_embeddings<F: Float>(
    ids: &[ItemId],
    params: &Params<F>,
    features: &FeatureTable<F>,
) -> Array2<F> {
    let tokens: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let (mut out, _) = item_dnn_tokens(&tokens, params, features);
    for mut row in out.outer_iter_mut() {
        let n = row.dot(&row).sqrt();
        if n > F::zero() {
            row /= n;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{PortableRng, Stream};
    use ndarray::array;

    fn random_params(din: usize, d: usize, seed: u64) -> ItemDnnParams<f64> {
        let mut r = PortableRng::new(seed, Stream::Test);
        let mut m = |a, b| Array2::from_shape_fn((a, b), |_| r.normal() * 0.5);
        ItemDnnParams {
            w_a: m(din, d),
            b_a: Array1::from_elem(d, 0.1),
            w_b: m(din, d),
            w_out: m(d, d),
            b_out: Array1::from_elem(d, -0.2),
        }
    }

    #[test]
    fn zero_nonlinear_path_is_linear() {
        let mut p = random_params(5, 3, 1);
        p.w_a.fill(0.0);
        p.b_a.fill(0.0);
        p.b_out.fill(0.0);
        let x = array![[0.3, -1.0, 2.0, 0.5, 0.1]];
        let y = array![[1.0, 0.4, -0.2, 0.0, 3.0]];
        let f = |v: &Array2<f64>| item_dnn_apply(v.clone(), &p).0;
        let lhs = f(&(&x * 2.0 + &y));
        let rhs = f(&x) * 2.0 + f(&y);
        for (a, b) in lhs.iter().zip(rhs.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let mut p = random_params(4, 3, 2);
        p.b_a.fill(0.0);
        p.b_out.fill(0.0);
        let z = Array1::<f64>::zeros(1);
        let out = item_dnn_forward(z.view(), Array1::zeros(0).view(), z.view(), Array1::zeros(2).view(), &p);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn w_b_gradient_matches_central_differences() {
        let p = random_params(4, 3, 3);
        let x = array![[0.3, -1.0, 2.0, 0.5], [1.0, 0.2, -0.7, 0.9]];
        let w = array![[0.5, -1.0, 0.3], [0.2, 0.8, -0.4]];
        let loss = |p: &ItemDnnParams<f64>| (&item_dnn_apply(x.clone(), p).0 * &w).sum();
        let (_, cache) = item_dnn_apply(x.clone(), &p);
        let mut g = ItemDnnParams {
            w_a: Array2::zeros((4, 3)),
            b_a: Array1::zeros(3),
            w_b: Array2::zeros((4, 3)),
            w_out: Array2::zeros((3, 3)),
            b_out: Array1::zeros(3),
        };
        item_dnn_backward(&w, &cache, &p, &mut g);
        let h = 1e-6;
        for i in 0..4 {
            for j in 0..3 {
                let mut pp = p.clone();
                pp.w_b[[i, j]] += h;
                let mut pm = p.clone();
                pm.w_b[[i, j]] -= h;
                let num = (loss(&pp) - loss(&pm)) / (2.0 * h);
                let ana = g.w_b[[i, j]];
                let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-8);
                assert!(rel < 1e-4, "w_b[{i},{j}]: {num} vs {ana}");
            }
        }
    }
}
