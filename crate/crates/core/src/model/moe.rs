//! Sparse top-k mixture of SiLU experts, plus usage accounting.

use ndarray::{Array2, ArrayView2, Axis};

use super::layers::{layer_norm, layer_norm_backward, silu, silu_grad, softmax, LnCache};
use super::params::{ExpertParams, MoeParams};
use super::Float;
use crate::error::{Error, Result};

/// Gini coefficient of a usage vector: `Σ|x_i − x_j| / (2 n² μ)`.
pub fn gini(counts: &[u64]) -> Result<f64> {
    let total: u64 = counts.iter().sum();
    if counts.is_empty() || total == 0 {
        return Err(Error::invalid("gini of all-zero usage counts is undefined"));
    }
    let mut sorted: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let weighted: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| (2.0 * (i as f64 + 1.0) - n - 1.0) * x)
        .sum();
    Ok(weighted / (n * total as f64))
}

/// Per-layer routed-token counts.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MoeStats {
    pub usage_counts: Vec<Vec<u64>>,
}

impl MoeStats {
    pub fn new(n_layers: usize, n_experts: usize) -> Self {
        Self {
            usage_counts: vec![vec![0; n_experts]; n_layers],
        }
    }

    pub fn merge(&mut self, other: &MoeStats) {
        if self.usage_counts.is_empty() {
            self.usage_counts = other.usage_counts.clone();
            return;
        }
        for (a, b) in self.usage_counts.iter_mut().zip(&other.usage_counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// Gini per layer; layers without traffic report 0.
    pub fn gini(&self) -> Vec<f64> {
        self.usage_counts.iter().map(|c| gini(c).unwrap_or(0.0)).collect()
    }
}

/// Experts chosen for one token, best first; ties go to the lower index.
pub fn top_k_route<F: Float>(logits: &[F], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[derive(Debug, Clone)]
struct ExpertCache<F> {
    tokens: Vec<(usize, usize)>,
    input: Array2<F>,
    pre: Array2<F>,
    hidden: Array2<F>,
    output: Array2<F>,
}

#[derive(Debug, Clone)]
pub struct MixtureCache<F> {
    input: Array2<F>,
    /// Full softmax over all gate logits, used by the balance loss.
    pub probs: Array2<F>,
    pub routes: Vec<Vec<usize>>,
    gates: Vec<Vec<F>>,
    experts: Vec<ExpertCache<F>>,
}

impl<F> MixtureCache<F> {
    pub fn usage(&self, n_experts: usize) -> Vec<u64> {
        let mut u = vec![0; n_experts];
        for r in &self.routes {
            for &e in r {
                u[e] += 1;
            }
        }
        u
    }
}

fn expert_forward<F: Float>(x: &Array2<F>, p: &ExpertParams<F>) -> (Array2<F>, Array2<F>, Array2<F>) {
    let pre = x.dot(&p.w1) + &p.b1;
    let hidden = pre.mapv(silu);
    let out = hidden.dot(&p.w2) + &p.b2;
    (pre, hidden, out)
}

/// `y_t = Σ_{j∈topk(t)} g_j(x_t) E_j(x_t)` for every row `x_t`. When
/// `routes` is given the expert choice is taken from it instead of the gate.
pub fn moe_mixture<F: Float>(
    x: ArrayView2<F>,
    p: &MoeParams<F>,
    top_k: usize,
    routes: Option<&[Vec<usize>]>,
) -> (Array2<F>, MixtureCache<F>) {
    let (n, d) = x.dim();
    let n_experts = p.experts.len();
    let logits = x.dot(&p.gate);
    let mut probs = Array2::zeros((n, n_experts));
    let mut all_routes = Vec::with_capacity(n);
    let mut gates = Vec::with_capacity(n);
    let mut assigned: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_experts];
    for t in 0..n {
        let row = logits.row(t);
        probs.row_mut(t).assign(&softmax(row));
        let route = match routes {
            Some(r) => r[t].clone(),
            None => top_k_route(row.as_slice().expect("contiguous"), top_k),
        };
        let kept: Vec<F> = route.iter().map(|&e| row[e]).collect();
        let g = softmax(ndarray::ArrayView1::from(&kept[..]));
        for (slot, &e) in route.iter().enumerate() {
            assigned[e].push((t, slot));
        }
        gates.push(g.to_vec());
        all_routes.push(route);
    }
    let mut y = Array2::zeros((n, d));
    let mut experts = Vec::with_capacity(n_experts);
    for (e, tokens) in assigned.into_iter().enumerate() {
        let rows: Vec<usize> = tokens.iter().map(|&(t, _)| t).collect();
        let input = x.select(Axis(0), &rows);
        let (pre, hidden, output) = expert_forward(&input, &p.experts[e]);
        for (i, &(t, slot)) in tokens.iter().enumerate() {
            y.row_mut(t).scaled_add(gates[t][slot], &output.row(i));
        }
        experts.push(ExpertCache {
            tokens,
            input,
            pre,
            hidden,
            output,
        });
    }
    let cache = MixtureCache {
        input: x.to_owned(),
        probs,
        routes: all_routes,
        gates,
        experts,
    };
    (y, cache)
}

/// Backward through the mixture. `balance` holds `∂L/∂p_j` for the full gate
/// softmax of every token (the same vector for all tokens), or is empty.
pub fn moe_mixture_backward<F: Float>(
    dy: ArrayView2<F>,
    c: &MixtureCache<F>,
    p: &MoeParams<F>,
    g: &mut MoeParams<F>,
    balance: &[F],
) -> Array2<F> {
    let (n, d) = dy.dim();
    let n_experts = p.experts.len();
    let mut dx = Array2::zeros((n, d));
    let mut d_gate_w: Vec<Vec<F>> = c.gates.iter().map(|g| vec![F::zero(); g.len()]).collect();
    for (e, ec) in c.experts.iter().enumerate() {
        if ec.tokens.is_empty() {
            continue;
        }
        let mut d_out = Array2::zeros(ec.output.dim());
        for (i, &(t, slot)) in ec.tokens.iter().enumerate() {
            d_gate_w[t][slot] = dy.row(t).dot(&ec.output.row(i));
            d_out.row_mut(i).scaled_add(c.gates[t][slot], &dy.row(t));
        }
        let gp = &mut g.experts[e];
        let pp = &p.experts[e];
        gp.w2 += &ec.hidden.t().dot(&d_out);
        gp.b2 += &d_out.sum_axis(Axis(0));
        let mut d_pre = d_out.dot(&pp.w2.t());
        d_pre.zip_mut_with(&ec.pre, |v, &z| *v *= silu_grad(z));
        gp.w1 += &ec.input.t().dot(&d_pre);
        gp.b1 += &d_pre.sum_axis(Axis(0));
        let d_in = d_pre.dot(&pp.w1.t());
        for (i, &(t, _)) in ec.tokens.iter().enumerate() {
            let mut r = dx.row_mut(t);
            r += &d_in.row(i);
        }
    }
    let mut d_logits = Array2::<F>::zeros((n, n_experts));
    for t in 0..n {
        let gt = &c.gates[t];
        let dot: F = gt.iter().zip(&d_gate_w[t]).map(|(&a, &b)| a * b).sum();
        for (slot, &e) in c.routes[t].iter().enumerate() {
            d_logits[[t, e]] += gt[slot] * (d_gate_w[t][slot] - dot);
        }
        if !balance.is_empty() {
            let pr = c.probs.row(t);
            let pdot: F = pr.iter().zip(balance).map(|(&a, &b)| a * b).sum();
            for j in 0..n_experts {
                d_logits[[t, j]] += pr[j] * (balance[j] - pdot);
            }
        }
    }
    g.gate += &c.input.t().dot(&d_logits);
    dx + d_logits.dot(&p.gate.t())
}

#[derive(Debug, Clone)]
pub struct MoeLayerCache<F> {
    ln: LnCache<F>,
    pub mixture: MixtureCache<F>,
}

/// Residual MoE sublayer: `x + MoE(LN(x))`.
pub fn moe_layer_forward<F: Float>(
    x: ArrayView2<F>,
    p: &MoeParams<F>,
    top_k: usize,
    routes: Option<&[Vec<usize>]>,
) -> (Array2<F>, MoeLayerCache<F>) {
    let (x_ln, ln) = layer_norm(x, &p.ln);
    let (y, mixture) = moe_mixture(x_ln.view(), p, top_k, routes);
    (x.to_owned() + y, MoeLayerCache { ln, mixture })
}

pub fn moe_layer_backward<F: Float>(
    d_out: ArrayView2<F>,
    c: &MoeLayerCache<F>,
    p: &MoeParams<F>,
    g: &mut MoeParams<F>,
    balance: &[F],
) -> Array2<F> {
    let d_xln = moe_mixture_backward(d_out, &c.mixture, p, g, balance);
    layer_norm_backward(d_xln.view(), &c.ln, &p.ln, &mut g.ln) + d_out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::{LayerNormParams, Params};
    use crate::model::{ModelConfig, MoeConfig};
    use crate::rng::{PortableRng, Stream};
    use ndarray::Array1;
    use proptest::prelude::*;

    fn params(n_experts: usize, seed: u64) -> MoeParams<f64> {
        let cfg = ModelConfig {
            hidden_dim: 6,
            n_heads: 1,
            n_layers: 1,
            vocab_size: 2,
            moe: MoeConfig {
                n_experts,
                top_k: 1,
                expert_hidden: 5,
            },
            ..Default::default()
        };
        let mut p = Params::<f64>::init(&cfg, seed).layers.remove(0).moe.unwrap();
        let mut r = PortableRng::new(seed, Stream::Test);
        for e in &mut p.experts {
            e.b1.mapv_inplace(|_| 0.1 * r.normal());
            e.b2.mapv_inplace(|_| 0.1 * r.normal());
        }
        p
    }

    fn input(n: usize, seed: u64) -> Array2<f64> {
        let mut r = PortableRng::new(seed, Stream::Test);
        Array2::from_shape_fn((n, 6), |_| r.normal())
    }

    fn pairwise_gini(x: &[u64]) -> f64 {
        let n = x.len() as f64;
        let mu = x.iter().sum::<u64>() as f64 / n;
        let mut s = 0.0;
        for &a in x {
            for &b in x {
                s += (a as f64 - b as f64).abs();
            }
        }
        s / (2.0 * n * n * mu)
    }

    #[test]
    fn gini_examples() {
        assert_eq!(gini(&[5, 5, 5, 5]).unwrap(), 0.0);
        assert!((gini(&[10, 0, 0, 0]).unwrap() - 0.75).abs() < 1e-15);
        assert!((gini(&[1, 2, 3, 4]).unwrap() - 0.25).abs() < 1e-15);
        assert!(gini(&[0, 0]).is_err());
    }

    proptest! {
        #[test]
        fn gini_matches_pairwise_and_is_bounded(x in proptest::collection::vec(0u64..1000, 1..12)) {
            prop_assume!(x.iter().any(|&v| v > 0));
            let g = gini(&x).unwrap();
            prop_assert!((g - pairwise_gini(&x)).abs() < 1e-12);
            let n = x.len() as f64;
            prop_assert!(g >= -1e-15 && g <= (n - 1.0) / n + 1e-12);
        }
    }

    #[test]
    fn single_expert_is_the_expert() {
        let p = params(1, 1);
        let x = input(3, 2);
        let (y, c) = moe_mixture(x.view(), &p, 1, None);
        let (_, _, direct) = expert_forward(&x, &p.experts[0]);
        assert_eq!(y, direct);
        assert!(c.gates.iter().all(|g| g == &vec![1.0]));
    }

    #[test]
    fn uniform_gate_averages_all_experts() {
        let mut p = params(4, 3);
        p.gate.fill(0.0);
        let x = input(2, 4);
        let (y, _) = moe_mixture(x.view(), &p, 4, None);
        let mut mean = Array2::zeros((2, 6));
        for e in &p.experts {
            mean = mean + expert_forward(&x, e).2;
        }
        mean /= 4.0;
        for (a, b) in y.iter().zip(mean.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn top1_route_is_gate_argmax() {
        let p = params(5, 5);
        let x = input(50, 6);
        let (_, c) = moe_mixture(x.view(), &p, 1, None);
        for t in 0..50 {
            let logits: Vec<f64> = (0..5).map(|j| x.row(t).dot(&p.gate.column(j))).collect();
            let mut best = 0;
            for j in 1..5 {
                if logits[j] > logits[best] {
                    best = j;
                }
            }
            assert_eq!(c.routes[t], vec![best]);
        }
    }

    #[test]
    fn usage_sums_to_tokens_times_k() {
        let p = params(6, 7);
        let (_, c) = moe_mixture(input(13, 8).view(), &p, 3, None);
        assert_eq!(c.usage(6).iter().sum::<u64>(), 39);
    }

    fn zero_like(p: &MoeParams<f64>) -> MoeParams<f64> {
        let mut z = p.clone();
        z.ln = LayerNormParams {
            gain: Array1::zeros(6),
            bias: Array1::zeros(6),
        };
        z.gate.fill(0.0);
        for e in &mut z.experts {
            e.w1.fill(0.0);
            e.b1.fill(0.0);
            e.w2.fill(0.0);
            e.b2.fill(0.0);
        }
        z
    }

    #[test]
    fn layer_backward_matches_finite_differences_with_fixed_routing() {
        let p = params(4, 9);
        let x = input(5, 10);
        let w = input(5, 11);
        let balance = [0.3, -0.2, 0.5, 0.1];
        let (_, cache) = moe_layer_forward(x.view(), &p, 2, None);
        let routes = cache.mixture.routes.clone();
        let loss = |x: &Array2<f64>, p: &MoeParams<f64>| {
            let (y, c) = moe_layer_forward(x.view(), p, 2, Some(&routes));
            let bal: f64 = c.mixture.probs.sum_axis(Axis(0)).iter().zip(&balance).map(|(a, b)| a * b).sum();
            (&y * &w).sum() + bal
        };
        let mut g = zero_like(&p);
        let dx = moe_layer_backward(w.view(), &cache, &p, &mut g, &balance);
        let h = 1e-6;
        let check = |num: f64, ana: f64, what: &str| {
            let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
            assert!(rel < 1e-5, "{what}: {num} vs {ana}");
        };
        for i in 0..5 {
            for j in 0..6 {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                check((loss(&xp, &p) - loss(&xm, &p)) / (2.0 * h), dx[[i, j]], "x");
            }
        }
        for i in 0..6 {
            for j in 0..4 {
                let mut pp = p.clone();
                pp.gate[[i, j]] += h;
                let mut pm = p.clone();
                pm.gate[[i, j]] -= h;
                check((loss(&x, &pp) - loss(&x, &pm)) / (2.0 * h), g.gate[[i, j]], "gate");
            }
        }
        let mut pp = p.clone();
        pp.experts[2].w1[[1, 3]] += h;
        let mut pm = p.clone();
        pm.experts[2].w1[[1, 3]] -= h;
        check((loss(&x, &pp) - loss(&x, &pm)) / (2.0 * h), g.experts[2].w1[[1, 3]], "w1");
    }
}
