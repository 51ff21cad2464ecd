//! Three-stage retrieval: semantic-ID beam search, inverted-index
//! expansion, then cosine re-ranking with history and cold-start filters.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::binio::{load_matrix, save_matrix};
use crate::data::{pad_truncate, ItemId, UserSequence};
use crate::error::{Error, Result};
use crate::model::heads::{decode_sid1_logits, decode_sid2_logits};
use crate::model::item_dnn::item_embeddings;
use crate::model::layers::log_softmax;
use crate::model::params::Params;
use crate::model::{encode_sequence, Float, Model};
use crate::tokenizer::{InvertedIndex, SemanticId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub beam_width: usize,
    pub k_prime: usize,
    pub top_n: usize,
    /// Restrict the beam to SID pairs that occur in the index.
    pub constrain_to_index: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            beam_width: 20,
            k_prime: 384,
            top_n: 10,
            constrain_to_index: false,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 || self.k_prime == 0 || self.top_n == 0 {
            return Err(Error::invalid("beam_width, k_prime and top_n must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamHypothesis {
    pub c1: u32,
    pub c2: Option<u32>,
    pub logp: f64,
}

fn to_f64<F: Float>(v: ArrayView1<F>) -> Vec<f64> {
    v.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect()
}

/// `log p(c1 | H)` for every level-1 code.
pub fn sid1_log_probs<F: Float>(h: ArrayView2<F>, p: &Params<F>) -> Vec<f64> {
    let (logits, _) = decode_sid1_logits(h, &p.sid1);
    to_f64(log_softmax(logits.view()).view())
}

/// `log p(c2 | c1, h_T)` for every level-2 code.
pub fn sid2_log_probs<F: Float>(h_t: ArrayView1<F>, c1: usize, p: &Params<F>) -> Result<Vec<f64>> {
    let logits = decode_sid2_logits(h_t, c1, &p.sid2)?;
    Ok(to_f64(log_softmax(logits.view()).view()))
}

fn by_logp_then_code(a: &(SemanticId, f64), b: &(SemanticId, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Keeps the `beam_width` best level-1 codes, expands each with every
/// level-2 code and returns the `k_prime` best complete pairs by joint
/// log-probability, ties broken by `(c1, c2)` ascending. With `constrain`,
/// only pairs present in the index are considered.
pub fn beam_search_sids<F: Float>(
    h: ArrayView2<F>,
    params: &Params<F>,
    beam_width: usize,
    k_prime: usize,
    constrain: Option<&InvertedIndex>,
) -> Result<Vec<(SemanticId, f64)>> {
    if beam_width == 0 || k_prime == 0 {
        return Err(Error::invalid("beam width and K' must be at least 1"));
    }
    if h.nrows() == 0 {
        return Err(Error::Empty("encoder output has no rows"));
    }
    let lp1 = sid1_log_probs(h, params);
    let allowed: Option<BTreeSet<u32>> = constrain.map(|idx| idx.keys().map(|s| s.c1).collect());
    let mut firsts: Vec<BeamHypothesis> = lp1
        .iter()
        .enumerate()
        .filter(|(c, _)| allowed.as_ref().is_none_or(|a| a.contains(&(*c as u32))))
        .map(|(c, &logp)| BeamHypothesis { c1: c as u32, c2: None, logp })
        .collect();
    firsts.sort_by(|a, b| b.logp.total_cmp(&a.logp).then(a.c1.cmp(&b.c1)));
    firsts.truncate(beam_width);
    let h_t = h.row(h.nrows() - 1);
    let mut complete = Vec::with_capacity(firsts.len() * lp1.len());
    for hyp in &firsts {
        let lp2 = sid2_log_probs(h_t, hyp.c1 as usize, params)?;
        for (c2, &l) in lp2.iter().enumerate() {
            let sid = SemanticId::new(hyp.c1 as usize, c2);
            if constrain.is_some_and(|idx| !idx.contains_key(&sid)) {
                continue;
            }
            complete.push((sid, hyp.logp + l));
        }
    }
    complete.sort_by(by_logp_then_code);
    complete.truncate(k_prime);
    Ok(complete)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CandidateSet {
    pub item_ids: Vec<ItemId>,
    /// SID pair through which each item was first reached.
    pub provenance: Vec<SemanticId>,
}

/// Union of the index buckets of `sid_pairs`, in pair order; an item reached
/// through several pairs keeps the first one.
pub fn expand_candidates(sid_pairs: &[(SemanticId, f64)], index: &InvertedIndex) -> CandidateSet {
    let mut seen = HashSet::new();
    let mut out = CandidateSet::default();
    for (sid, _) in sid_pairs {
        for &item in index.get(sid).map(Vec::as_slice).unwrap_or(&[]) {
            if seen.insert(item) {
                out.item_ids.push(item);
                out.provenance.push(*sid);
            }
        }
    }
    out
}

/// L2-normalized item-tower outputs for the servable (non-cold-start) items.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemEmbeddingMatrix {
    pub item_ids: Vec<ItemId>,
    pub vectors: Array2<f32>,
    rows: HashMap<ItemId, usize>,
}

impl ItemEmbeddingMatrix {
    pub fn new(item_ids: Vec<ItemId>, vectors: Array2<f32>) -> Result<Self> {
        if item_ids.len() != vectors.nrows() {
            return Err(Error::Shape(format!("{} ids for {} rows", item_ids.len(), vectors.nrows())));
        }
        let rows: HashMap<ItemId, usize> = item_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        if rows.len() != item_ids.len() {
            return Err(Error::invalid("duplicate item id in embedding matrix"));
        }
        Ok(Self { item_ids, vectors, rows })
    }

    /// Exports the item tower over `items` (ascending order).
    pub fn from_model(model: &Model<f32>, items: &BTreeSet<ItemId>) -> Result<Self> {
        let ids: Vec<ItemId> = items.iter().copied().collect();
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= model.config.vocab_size) {
            return Err(Error::invalid(format!("item {bad} outside vocabulary")));
        }
        let vectors = item_embeddings(&ids, &model.params, &model.features);
        Self::new(ids, vectors)
    }

    pub fn row(&self, item: ItemId) -> Option<ArrayView1<'_, f32>> {
        self.rows.get(&item).map(|&r| self.vectors.row(r))
    }

    pub fn contains(&self, item: ItemId) -> bool {
        self.rows.contains_key(&item)
    }

    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    /// Writes `<stem>.bin` (matrix) and `<stem>.ids` (one id per line).
    pub fn save(&self, stem: &Path) -> Result<()> {
        save_matrix(&stem.with_extension("bin"), &self.vectors)?;
        let ids: String = self.item_ids.iter().map(|i| format!("{i}\n")).collect();
        let p = stem.with_extension("ids");
        fs::write(&p, ids).map_err(|e| Error::io(&p, e))
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let vectors = load_matrix(&stem.with_extension("bin"))?;
        let p = stem.with_extension("ids");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let ids = text
            .lines()
            .enumerate()
            .map(|(n, l)| {
                l.trim().parse::<ItemId>().map_err(|e| Error::Parse {
                    path: p.clone(),
                    line: n + 1,
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(ids, vectors)
    }
}

/// Cosine similarity of `q` with each candidate that has an embedding row,
/// in candidate order; candidates without a row are dropped.
pub fn score_candidates(q: ArrayView1<f32>, candidates: &CandidateSet, emb: &ItemEmbeddingMatrix) -> Vec<(ItemId, f64)> {
    let q: Vec<f64> = q.iter().map(|&v| v as f64).collect();
    let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    candidates
        .item_ids
        .iter()
        .filter_map(|&item| {
            let k = emb.row(item)?;
            let (mut dot, mut kk) = (0.0, 0.0);
            for (&a, &b) in q.iter().zip(k.iter()) {
                dot += a * b as f64;
                kk += (b as f64) * (b as f64);
            }
            let denom = qn * kk.sqrt();
            let s = if denom > 0.0 { (dot / denom).clamp(-1.0, 1.0) } else { 0.0 };
            Some((item, s))
        })
        .collect()
}

/// Ordered `(item, score)` list; scores non-increasing.
pub type RecList = Vec<(ItemId, f64)>;

/// Drops cold-start and history items, then keeps the `top` best by score
/// with ties broken by ascending item id.
pub fn filter_and_rank(
    scores: &[(ItemId, f64)],
    history: &HashSet<ItemId>,
    cold_start: &HashSet<ItemId>,
    top: usize,
) -> RecList {
    let mut kept: Vec<(ItemId, f64)> = scores
        .iter()
        .filter(|(i, _)| !cold_start.contains(i))
        .map(|&(i, s)| (i, if history.contains(&i) { f64::NEG_INFINITY } else { s }))
        .filter(|(_, s)| *s > f64::NEG_INFINITY)
        .collect();
    kept.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    kept.truncate(top);
    if kept.len() < top {
        log::debug!("only {} of {top} recommendations survived filtering", kept.len());
    }
    kept
}

/// Everything needed to serve recommendations; immutable once built.
pub struct Recommender<'a> {
    pub model: &'a Model<f32>,
    pub index: &'a InvertedIndex,
    pub embeddings: &'a ItemEmbeddingMatrix,
    pub cold_start: &'a HashSet<ItemId>,
}

#[derive(Debug, Clone)]
pub struct Trace {
    pub sid_pairs: Vec<(SemanticId, f64)>,
    pub candidates: CandidateSet,
    pub recs: RecList,
}

impl Recommender<'_> {
    fn encode(&self, history: &[ItemId]) -> Result<crate::model::EncoderCache<f32>> {
        let cfg = &self.model.config;
        let seq = UserSequence {
            user_id: 0,
            history: history.to_vec(),
            target: None,
        };
        let row = pad_truncate(&seq, cfg.l_max, (cfg.vocab_size - 1) as ItemId)?;
        encode_sequence(&row, self.model)
    }

    /// Full cascade with intermediate results.
    pub fn recommend_traced(&self, history: &[ItemId], cfg: &InferenceConfig) -> Result<Trace> {
        cfg.validate()?;
        let enc = self.encode(history)?;
        let constrain = cfg.constrain_to_index.then_some(self.index);
        let sid_pairs = beam_search_sids(enc.h.view(), &self.model.params, cfg.beam_width, cfg.k_prime, constrain)?;
        let candidates = expand_candidates(&sid_pairs, self.index);
        let scores = score_candidates(enc.h_t.view(), &candidates, self.embeddings);
        let hist: HashSet<ItemId> = history.iter().copied().collect();
        let recs = filter_and_rank(&scores, &hist, self.cold_start, cfg.top_n);
        Ok(Trace {
            sid_pairs,
            candidates,
            recs,
        })
    }

    pub fn recommend(&self, history: &[ItemId], cfg: &InferenceConfig) -> Result<RecList> {
        Ok(self.recommend_traced(history, cfg)?.recs)
    }

    /// Pure embedding retrieval over every indexed item with an embedding.
    pub fn dual_tower(&self, history: &[ItemId], top: usize) -> Result<RecList> {
        let enc = self.encode(history)?;
        let all = CandidateSet {
            item_ids: self.index.values().flatten().copied().collect(),
            provenance: Vec::new(),
        };
        let scores = score_candidates(enc.h_t.view(), &all, self.embeddings);
        let hist: HashSet<ItemId> = history.iter().copied().collect();
        Ok(filter_and_rank(&scores, &hist, self.cold_start, top))
    }

    /// Level-1 codes ranked by the first head, and the joint beam pairs.
    pub fn sid_rankings(&self, history: &[ItemId], beam_width: usize, top: usize) -> Result<(Vec<u32>, Vec<SemanticId>)> {
        let enc = self.encode(history)?;
        let lp1 = sid1_log_probs(enc.h.view(), &self.model.params);
        let mut order: Vec<u32> = (0..lp1.len() as u32).collect();
        order.sort_by(|&a, &b| lp1[b as usize].total_cmp(&lp1[a as usize]).then(a.cmp(&b)));
        order.truncate(top);
        let pairs = beam_search_sids(enc.h.view(), &self.model.params, beam_width, top, None)?;
        Ok((order, pairs.into_iter().map(|(s, _)| s).collect()))
    }

    /// Level-2 codes ranked by `p(c2 | c1)` for a given level-1 code.
    pub fn sid2_ranking(&self, history: &[ItemId], c1: usize, top: usize) -> Result<Vec<u32>> {
        let enc = self.encode(history)?;
        let lp2 = sid2_log_probs(enc.h_t.view(), c1, &self.model.params)?;
        let mut order: Vec<u32> = (0..lp2.len() as u32).collect();
        order.sort_by(|&a, &b| lp2[b as usize].total_cmp(&lp2[a as usize]).then(a.cmp(&b)));
        order.truncate(top);
        Ok(order)
    }
}

/// Cosine of two vectors, for callers outside the cascade.
pub fn cosine(a: ArrayView1<f32>, b: ArrayView1<f32>) -> f64 {
    let a64: Array1<f64> = a.mapv(|v| v as f64);
    let b64: Array1<f64> = b.mapv(|v| v as f64);
    let d = (a64.dot(&a64) * b64.dot(&b64)).sqrt();
    if d > 0.0 {
        (a64.dot(&b64) / d).clamp(-1.0, 1.0)
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::Params;
    use crate::model::ModelConfig;
    use crate::rng::{PortableRng, Stream};
    use ndarray::array;
    use proptest::prelude::*;

    fn params(k: usize, seed: u64) -> (Params<f64>, Array2<f64>) {
        let cfg = ModelConfig {
            hidden_dim: 4,
            n_heads: 1,
            n_layers: 1,
            codebook_size: k,
            vocab_size: 2,
            ..Default::default()
        };
        let mut r = PortableRng::new(seed, Stream::Test);
        let h = Array2::from_shape_fn((3, 4), |_| r.normal());
        (Params::init(&cfg, seed), h)
    }

    #[test]
    fn hand_enumerated_two_code_case() {
        let (mut p, h) = params(2, 1);
        p.sid1.w_proj.fill(0.0);
        p.sid1.b_proj = array![0.9f64.ln(), 0.1f64.ln()];
        p.sid2.w_proj.fill(0.0);
        p.sid2.b_proj.fill(0.0);
        let out = beam_search_sids(h.view(), &p, 2, 4, None).unwrap();
        assert_eq!(out[0].0, SemanticId::new(0, 0));
        assert!((out[0].1 - 0.45f64.ln()).abs() < 1e-12);
        assert_eq!(out[1].0, SemanticId::new(0, 1));
        assert_eq!(out.len(), 4);
    }

    #[test]
    fn greedy_beam_shares_one_first_code() {
        let (p, h) = params(6, 2);
        let out = beam_search_sids(h.view(), &p, 1, 10, None).unwrap();
        assert_eq!(out.len(), 6);
        assert!(out.iter().all(|(s, _)| s.c1 == out[0].0.c1));
    }

    #[test]
    fn wider_beam_never_hurts_top1() {
        for seed in 0..20 {
            let (p, h) = params(5, seed);
            let best: Vec<f64> = (1..=5).map(|b| beam_search_sids(h.view(), &p, b, 1, None).unwrap()[0].1).collect();
            assert!(best.windows(2).all(|w| w[1] >= w[0]));
        }
    }

    #[test]
    fn constrained_beam_only_emits_indexed_pairs() {
        let (p, h) = params(4, 3);
        let mut idx = InvertedIndex::new();
        idx.insert(SemanticId::new(3, 1), vec![7]);
        idx.insert(SemanticId::new(2, 2), vec![8, 9]);
        let out = beam_search_sids(h.view(), &p, 1, 16, Some(&idx)).unwrap();
        assert_eq!(out.len(), 1);
        assert!(idx.contains_key(&out[0].0));
    }

    #[test]
    fn expansion_dedups_and_keeps_first_provenance() {
        let mut idx = InvertedIndex::new();
        idx.insert(SemanticId::new(0, 0), vec![1, 2]);
        idx.insert(SemanticId::new(1, 4), vec![2, 3]);
        let c = expand_candidates(&[(SemanticId::new(0, 0), -1.0), (SemanticId::new(1, 4), -2.0)], &idx);
        assert_eq!(c.item_ids, vec![1, 2, 3]);
        assert_eq!(c.provenance[1], SemanticId::new(0, 0));
        let none = expand_candidates(&[(SemanticId::new(5, 5), -1.0)], &idx);
        assert!(none.item_ids.is_empty());
    }

    proptest! {
        #[test]
        fn candidate_count_bounded_by_bucket_sizes(
            buckets in proptest::collection::vec(proptest::collection::vec(0u64..40, 0..6), 1..8)
        ) {
            let mut idx = InvertedIndex::new();
            let mut pairs = Vec::new();
            for (i, b) in buckets.iter().enumerate() {
                let mut b = b.clone();
                b.sort_unstable();
                b.dedup();
                let sid = SemanticId::new(i, 0);
                idx.insert(sid, b);
                pairs.push((sid, -(i as f64)));
            }
            let c = expand_candidates(&pairs, &idx);
            let total: usize = idx.values().map(Vec::len).sum();
            prop_assert!(c.item_ids.len() <= total);
            let uniq: HashSet<_> = c.item_ids.iter().collect();
            prop_assert_eq!(uniq.len(), c.item_ids.len());
        }
    }

    fn emb(rows: &[(ItemId, [f32; 2])]) -> ItemEmbeddingMatrix {
        let ids = rows.iter().map(|r| r.0).collect();
        let v = Array2::from_shape_fn((rows.len(), 2), |(i, j)| rows[i].1[j]);
        ItemEmbeddingMatrix::new(ids, v).unwrap()
    }

    #[test]
    fn scores_hit_cosine_extremes_and_skip_missing_rows() {
        let e = emb(&[(1, [0.6, 0.8]), (2, [-0.6, -0.8])]);
        let c = CandidateSet {
            item_ids: vec![1, 2, 3],
            provenance: vec![],
        };
        let s = score_candidates(array![0.6f32, 0.8].view(), &c, &e);
        assert_eq!(s.len(), 2);
        assert!((s[0].1 - 1.0).abs() < 1e-12);
        assert!((s[1].1 + 1.0).abs() < 1e-12);
    }

    #[test]
    fn filtering_examples() {
        let scores = vec![(1, 0.9), (2, 0.8), (3, 0.7)];
        let none = HashSet::new();
        let hist: HashSet<ItemId> = [1].into();
        let out = filter_and_rank(&scores, &hist, &none, 10);
        assert_eq!(out.iter().map(|r| r.0).collect::<Vec<_>>(), vec![2, 3]);
        let all: HashSet<ItemId> = [1, 2, 3].into();
        assert!(filter_and_rank(&scores, &all, &none, 10).is_empty());
        let tied = vec![(9, 0.5), (4, 0.5)];
        assert_eq!(filter_and_rank(&tied, &none, &none, 10)[0].0, 4);
    }

    proptest! {
        #[test]
        fn filtered_output_avoids_history_and_cold_start(
            scores in proptest::collection::vec((0u64..50, -1.0f64..1.0), 0..60),
            hist in proptest::collection::hash_set(0u64..50, 0..20),
            cold in proptest::collection::hash_set(0u64..50, 0..20),
        ) {
            let out = filter_and_rank(&scores, &hist, &cold, 10);
            prop_assert!(out.len() <= 10);
            for (i, _) in &out {
                prop_assert!(!hist.contains(i) && !cold.contains(i));
            }
            prop_assert!(out.windows(2).all(|w| w[0].1 >= w[1].1));
        }
    }

    #[test]
    fn embedding_matrix_roundtrips() {
        let e = emb(&[(5, [0.6, 0.8]), (2, [1.0, 0.0])]);
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("items");
        e.save(&stem).unwrap();
        assert_eq!(ItemEmbeddingMatrix::load(&stem).unwrap(), e);
    }
}
