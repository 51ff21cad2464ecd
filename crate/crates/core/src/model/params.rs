use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};

use super::{Float, ModelConfig};
use crate::rng::{PortableRng, Stream};

/// Uniform access to every trainable tensor, in a fixed order, under a
/// dotted name such as `layers.0.hstu.w_uvqk`.
pub trait TensorSet<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, F>)>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, F>)>);
}

fn join(prefix: &str, field: &str) -> String {
    if prefix.is_empty() {
        field.to_string()
    } else {
        format!("{prefix}.{field}")
    }
}

impl<F: Float> TensorSet<F> for Array1<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, F>)>) {
        out.push((prefix.to_string(), self.view().into_dyn()));
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, F>)>) {
        out.push((prefix.to_string(), self.view_mut().into_dyn()));
    }
}

impl<F: Float> TensorSet<F> for Array2<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, F>)>) {
        out.push((prefix.to_string(), self.view().into_dyn()));
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, F>)>) {
        out.push((prefix.to_string(), self.view_mut().into_dyn()));
    }
}

impl<F, T: TensorSet<F>> TensorSet<F> for Vec<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, F>)>) {
        for (i, t) in self.iter().enumerate() {
            t.collect(&join(prefix, &i.to_string()), out);
        }
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, F>)>) {
        for (i, t) in self.iter_mut().enumerate() {
            t.collect_mut(&join(prefix, &i.to_string()), out);
        }
    }
}

impl<F, T: TensorSet<F>> TensorSet<F> for Option<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, F>)>) {
        if let Some(t) = self {
            t.collect(prefix, out);
        }
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, F>)>) {
        if let Some(t) = self {
            t.collect_mut(prefix, out);
        }
    }
}

macro_rules! tensor_struct {
    ($(#[$meta:meta])* $name:ident { $($field:ident : $ty:ty),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name<F> {
            $(pub $field: $ty,)*
        }

        impl<F: Float> TensorSet<F> for $name<F> {
            fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, F>)>) {
                $(self.$field.collect(&join(prefix, stringify!($field)), out);)*
            }
            fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, F>)>) {
                $(self.$field.collect_mut(&join(prefix, stringify!($field)), out);)*
            }
        }
    };
}

tensor_struct!(LayerNormParams {
    gain: Array1<F>,
    bias: Array1<F>,
});

tensor_struct!(
    /// Dual-path item tower: `w_out · (ReLU(w_a·c + b_a) + w_b·c) + b_out`.
    ItemDnnParams {
        w_a: Array2<F>,
        b_a: Array1<F>,
        w_b: Array2<F>,
        w_out: Array2<F>,
        b_out: Array1<F>,
    }
);

tensor_struct!(HstuParams {
    ln_in: LayerNormParams<F>,
    w_uvqk: Array2<F>,
    b_uvqk: Array1<F>,
    ln_attn: LayerNormParams<F>,
    w_o: Array2<F>,
    b_o: Array1<F>,
});

tensor_struct!(ExpertParams {
    w1: Array2<F>,
    b1: Array1<F>,
    w2: Array2<F>,
    b2: Array1<F>,
});

tensor_struct!(MoeParams {
    ln: LayerNormParams<F>,
    gate: Array2<F>,
    experts: Vec<ExpertParams<F>>,
});

tensor_struct!(LayerParams {
    hstu: HstuParams<F>,
    moe: Option<MoeParams<F>>,
});

tensor_struct!(
    /// Cross-attention from `h_T` over the encoder output, projected to K codes.
    Sid1Params {
        w_q: Array2<F>,
        w_k: Array2<F>,
        w_v: Array2<F>,
        w_proj: Array2<F>,
        b_proj: Array1<F>,
    }
);

tensor_struct!(
    /// `MLP([h_T; E(c1)])` projected to K codes.
    Sid2Params {
        code_emb: Array2<F>,
        w_a: Array2<F>,
        b_a: Array1<F>,
        w_b: Array2<F>,
        b_b: Array1<F>,
        w_proj: Array2<F>,
        b_proj: Array1<F>,
    }
);

tensor_struct!(Params {
    item_emb: Array2<F>,
    pos_emb: Array2<F>,
    item_dnn: ItemDnnParams<F>,
    layers: Vec<LayerParams<F>>,
    final_ln: LayerNormParams<F>,
    sid1: Sid1Params<F>,
    sid2: Sid2Params<F>,
});

fn ln<F: Float>(d: usize) -> LayerNormParams<F> {
    LayerNormParams {
        gain: Array1::zeros(d),
        bias: Array1::zeros(d),
    }
}

impl<F: Float> Params<F> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.hidden_dim;
        let k = cfg.codebook_size;
        let z2 = |r, c| Array2::zeros((r, c));
        let z1 = |n| Array1::zeros(n);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                hstu: HstuParams {
                    ln_in: ln(d),
                    w_uvqk: z2(d, 4 * d),
                    b_uvqk: z1(4 * d),
                    ln_attn: ln(d),
                    w_o: z2(d, d),
                    b_o: z1(d),
                },
                moe: cfg.use_moe.then(|| MoeParams {
                    ln: ln(d),
                    gate: z2(d, cfg.moe.n_experts),
                    experts: (0..cfg.moe.n_experts)
                        .map(|_| ExpertParams {
                            w1: z2(d, cfg.moe.expert_hidden),
                            b1: z1(cfg.moe.expert_hidden),
                            w2: z2(cfg.moe.expert_hidden, d),
                            b2: z1(d),
                        })
                        .collect(),
                }),
            })
            .collect();
        Params {
            item_emb: z2(cfg.vocab_size, d),
            pos_emb: z2(cfg.l_max, d),
            item_dnn: ItemDnnParams {
                w_a: z2(cfg.item_input_dim(), d),
                b_a: z1(d),
                w_b: z2(cfg.item_input_dim(), d),
                w_out: z2(d, d),
                b_out: z1(d),
            },
            layers,
            final_ln: ln(d),
            sid1: Sid1Params {
                w_q: z2(d, d),
                w_k: z2(d, d),
                w_v: z2(d, d),
                w_proj: z2(d, k),
                b_proj: z1(k),
            },
            sid2: Sid2Params {
                code_emb: z2(k, d),
                w_a: z2(2 * d, d),
                b_a: z1(d),
                w_b: z2(d, d),
                b_b: z1(d),
                w_proj: z2(d, k),
                b_proj: z1(k),
            },
        }
    }

    /// Random initialisation: unit LayerNorm gains, zero biases, small
    /// embedding tables, `N(0, 1/fan_in)` weight matrices and output
    /// projections scaled down by 10 so code logits start near uniform.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut p = Self::zeros(cfg);
        let mut rng = PortableRng::new(seed, Stream::Init);
        let d = cfg.hidden_dim as f64;
        for (name, mut t) in p.named_mut() {
            let leaf = name.rsplit('.').next().unwrap_or(&name).to_string();
            let std = match leaf.as_str() {
                "gain" => {
                    t.fill(F::one());
                    continue;
                }
                l if l == "bias" || l.starts_with('b') => continue,
                "item_emb" => 0.1,
                "pos_emb" => 0.02,
                "code_emb" => 1.0 / d.sqrt(),
                "w_proj" => 0.1 / (t.shape()[0] as f64).sqrt(),
                "w_o" | "w2" => 0.1 / (t.shape()[0] as f64).sqrt(),
                _ => 1.0 / (t.shape()[0] as f64).sqrt(),
            };
            t.mapv_inplace(|_| super::cst(std * rng.normal()));
        }
        p
    }

    pub fn named(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Elementwise `self += other`, tensor by tensor in the fixed order.
    pub fn add_assign(&mut self, other: &Self) {
        for ((_, mut a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            a += &b;
        }
    }

    pub fn scale(&mut self, s: F) {
        for (_, mut t) in self.named_mut() {
            t.mapv_inplace(|v| v * s);
        }
    }

    pub fn cast<G: Float>(&self, cfg: &ModelConfig) -> Params<G> {
        let mut out = Params::<G>::zeros(cfg);
        for ((_, mut dst), (_, src)) in out.named_mut().into_iter().zip(self.named()) {
            dst.zip_mut_with(&src, |d, &s| *d = G::from_f64(s.to_f64().unwrap_or(f64::NAN)).unwrap_or(G::nan()));
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

impl ModelConfig {
    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.hidden_dim;
        let k = self.codebook_size;
        let din = self.item_input_dim();
        let ln = 2 * d;
        let hstu = ln + d * 4 * d + 4 * d + ln + d * d + d;
        let moe = if self.use_moe {
            let h = self.moe.expert_hidden;
            ln + d * self.moe.n_experts + self.moe.n_experts * (d * h + h + h * d + d)
        } else {
            0
        };
        let item_dnn = din * d + d + din * d + d * d + d;
        let sid1 = 3 * d * d + d * k + k;
        let sid2 = k * d + 2 * d * d + d + d * d + d + d * k + k;
        self.vocab_size * d + self.l_max * d + item_dnn + self.n_layers * (hstu + moe) + ln + sid1 + sid2
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            hidden_dim: 8,
            n_heads: 2,
            n_layers: 3,
            codebook_size: 5,
            l_max: 4,
            vocab_size: 11,
            feature_dim: 3,
            ..Default::default()
        }
    }

    #[test]
    fn analytic_count_matches_enumeration() {
        for use_moe in [true, false] {
            let c = ModelConfig { use_moe, ..cfg() };
            let p = Params::<f64>::zeros(&c);
            assert_eq!(p.param_count(), c.param_count());
        }
    }

    #[test]
    fn count_grows_with_depth() {
        let counts: Vec<usize> = [1, 2, 4]
            .iter()
            .map(|&n| ModelConfig { n_layers: n, ..cfg() }.param_count())
            .collect();
        assert!(counts.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn names_are_unique_and_dotted() {
        let p = Params::<f32>::zeros(&cfg());
        let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        assert!(names.contains(&"layers.2.moe.experts.7.w2".to_string()));
        assert!(names.contains(&"sid2.code_emb".to_string()));
    }

    #[test]
    fn init_is_deterministic_and_finite() {
        let a = Params::<f32>::init(&cfg(), 3);
        let b = Params::<f32>::init(&cfg(), 3);
        assert_eq!(a, b);
        assert!(a.all_finite());
        assert!(a.final_ln.gain.iter().all(|&g| g == 1.0));
        assert!(a.sid1.b_proj.iter().all(|&g| g == 0.0));
        assert!(a.sid1.w_q.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn cast_roundtrips_through_f64() {
        let a = Params::<f32>::init(&cfg(), 1);
        let b: Params<f32> = a.cast::<f64>(&cfg()).cast(&cfg());
        assert_eq!(a, b);
    }
}
