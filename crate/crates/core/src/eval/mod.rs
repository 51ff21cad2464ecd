//! Ranking metrics, split evaluation, depth sweeps and power-law fits.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ItemCatalog, ItemId, UserSequence};
use crate::error::{Error, Result};
use crate::inference::{InferenceConfig, Recommender};
use crate::model::ModelConfig;
use crate::pipeline::prepare_training;
use crate::tokenizer::AssignmentTable;
use crate::training::{last_n_average, TrainConfig, Trainer};

/// 1-based position of `target` in `ranked`.
pub fn rank_of(ranked: &[ItemId], target: ItemId) -> Option<usize> {
    ranked.iter().position(|&i| i == target).map(|p| p + 1)
}

pub fn hr_at_k(ranked: &[ItemId], target: ItemId, k: usize) -> f64 {
    match rank_of(ranked, target) {
        Some(r) if r <= k => 1.0,
        _ => 0.0,
    }
}

/// Single-relevant-item NDCG: `1 / log2(rank + 1)` inside the top k.
pub fn ndcg_at_k(ranked: &[ItemId], target: ItemId, k: usize) -> f64 {
    match rank_of(ranked, target) {
        Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub split: String,
    pub epoch: u64,
    pub hr_at_10: f64,
    pub ndcg_at_10: f64,
    pub model_size_params: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Sid2Rule {
    /// The true pair is among the joint top-k beam pairs.
    #[default]
    JointBeam,
    /// The true c2 is among the top-k of `p(c2 | true c1)`.
    Conditional,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EvalMode {
    Cascade(InferenceConfig),
    DualTower { top_n: usize },
    SidOnly { beam_width: usize, rule: Sid2Rule },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalResult {
    pub n_users: usize,
    pub hr: f64,
    pub ndcg: f64,
    pub sid1_hr: Option<f64>,
    pub sid2_hr: Option<f64>,
}

/// Sum that does not depend on the order of `values`.
fn order_free_mean(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    values.into_iter().sum::<f64>() / n
}

fn usable(split: &[UserSequence]) -> Result<Vec<(&UserSequence, ItemId)>> {
    let users: Vec<_> = split
        .iter()
        .filter(|s| !s.history.is_empty())
        .filter_map(|s| s.target.map(|t| (s, t)))
        .collect();
    if users.is_empty() {
        Err(Error::Empty("split has no users with history and target"))
    } else {
        Ok(users)
    }
}

/// Mean HR@k and NDCG@k of an arbitrary ranker over the split's users.
pub fn evaluate_with<R>(split: &[UserSequence], k: usize, ranker: R) -> Result<(f64, f64)>
where
    R: Fn(&UserSequence) -> Result<Vec<ItemId>> + Sync,
{
    let users = usable(split)?;
    let per_user: Vec<(f64, f64)> = users
        .par_iter()
        .map(|&(s, t)| {
            let ranked = ranker(s)?;
            Ok((hr_at_k(&ranked, t, k), ndcg_at_k(&ranked, t, k)))
        })
        .collect::<Result<_>>()?;
    let (hr, ndcg): (Vec<f64>, Vec<f64>) = per_user.into_iter().unzip();
    Ok((order_free_mean(hr), order_free_mean(ndcg)))
}

/// Evaluates a split through the cascade, the embedding tower alone, or the
/// SID heads alone (the latter needs the SID table for ground truth).
pub fn evaluate_split(
    rec: &Recommender<'_>,
    split: &[UserSequence],
    mode: &EvalMode,
    table: Option<&AssignmentTable>,
) -> Result<EvalResult> {
    let k = 10;
    match mode {
        EvalMode::Cascade(cfg) => {
            let (hr, ndcg) = evaluate_with(split, k, |s| {
                Ok(rec.recommend(&s.history, cfg)?.into_iter().map(|r| r.0).collect())
            })?;
            Ok(EvalResult {
                n_users: usable(split)?.len(),
                hr,
                ndcg,
                ..Default::default()
            })
        }
        EvalMode::DualTower { top_n } => {
            let (hr, ndcg) = evaluate_with(split, k, |s| {
                Ok(rec.dual_tower(&s.history, *top_n)?.into_iter().map(|r| r.0).collect())
            })?;
            Ok(EvalResult {
                n_users: usable(split)?.len(),
                hr,
                ndcg,
                ..Default::default()
            })
        }
        EvalMode::SidOnly { beam_width, rule } => {
            let table = table.ok_or_else(|| Error::invalid("SID evaluation needs the assignment table"))?;
            let users = usable(split)?;
            let hits: Vec<(f64, f64)> = users
                .par_iter()
                .map(|&(s, t)| {
                    let truth = table
                        .get(t)
                        .ok_or_else(|| Error::invalid(format!("target {t} has no semantic id")))?;
                    let (c1s, pairs) = rec.sid_rankings(&s.history, *beam_width, k)?;
                    let h1 = f64::from(u8::from(c1s.contains(&truth.c1)));
                    let h2 = match rule {
                        Sid2Rule::JointBeam => pairs.contains(&truth),
                        Sid2Rule::Conditional => rec.sid2_ranking(&s.history, truth.c1 as usize, k)?.contains(&truth.c2),
                    };
                    Ok((h1, f64::from(u8::from(h2))))
                })
                .collect::<Result<_>>()?;
            let (a, b): (Vec<f64>, Vec<f64>) = hits.into_iter().unzip();
            Ok(EvalResult {
                n_users: users.len(),
                hr: 0.0,
                ndcg: 0.0,
                sid1_hr: Some(order_free_mean(a)),
                sid2_hr: Some(order_free_mean(b)),
            })
        }
    }
}

/// Items ordered by training interaction count (descending, ties by id),
/// restricted to `servable`.
pub fn popularity_ranking(train: &[UserSequence], servable: &BTreeSet<ItemId>) -> Vec<ItemId> {
    let mut counts: HashMap<ItemId, u64> = HashMap::new();
    for s in train {
        for &i in s.history.iter().chain(s.target.iter()) {
            *counts.entry(i).or_insert(0) += 1;
        }
    }
    let mut items: Vec<ItemId> = servable.iter().copied().collect();
    items.sort_by(|a, b| counts.get(b).unwrap_or(&0).cmp(counts.get(a).unwrap_or(&0)).then(a.cmp(b)));
    items
}

/// Most-popular recommender with the same history filter as the cascade.
pub fn popularity_baseline(split: &[UserSequence], ranking: &[ItemId], k: usize) -> Result<(f64, f64)> {
    evaluate_with(split, k, |s| {
        let hist: BTreeSet<ItemId> = s.history.iter().copied().collect();
        Ok(ranking.iter().copied().filter(|i| !hist.contains(i)).take(k).collect())
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub a: f64,
    pub b: f64,
    pub r2: f64,
}

impl PowerLawFit {
    pub fn predict(&self, n: f64) -> f64 {
        self.a * n.powf(-self.b)
    }
}

/// Least squares on `(ln N, ln L)` for `L = a · N^(−b)`. R² is computed on
/// the log-loss residuals and defined as 1 when the losses do not vary.
pub fn power_law_fit(model_sizes: &[f64], losses: &[f64]) -> Result<PowerLawFit> {
    if model_sizes.len() != losses.len() {
        return Err(Error::Shape("sizes and losses differ in length".into()));
    }
    if model_sizes.len() < 3 {
        return Err(Error::invalid("power-law fit needs at least 3 points"));
    }
    if model_sizes.iter().chain(losses).any(|&v| v.is_nan() || v <= 0.0 || !v.is_finite()) {
        return Err(Error::invalid("power-law fit needs positive finite values"));
    }
    let x: Vec<f64> = model_sizes.iter().map(|v| v.ln()).collect();
    let y: Vec<f64> = losses.iter().map(|v| v.ln()).collect();
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("power-law fit needs at least two distinct sizes"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let ss_res: f64 = x.iter().zip(&y).map(|(a, b)| (b - (intercept + slope * a)).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(PowerLawFit {
        a: intercept.exp(),
        b: -slope,
        r2,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub layers: usize,
    pub params: usize,
    /// Last-100-batch in-batch hit rate.
    pub metric_a: f64,
    /// Last-100-batch in-batch NDCG.
    pub metric_b: f64,
    /// Last-100-batch contrastive loss.
    pub loss: f64,
}

pub struct SweepSetup<'a> {
    pub catalog: &'a ItemCatalog,
    pub train: &'a [UserSequence],
    pub table: &'a AssignmentTable,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub init_seed: u64,
}

/// Trains one model per depth on identical data and seeds.
pub fn layer_sweep(setup: &SweepSetup<'_>, layer_counts: &[usize]) -> Result<Vec<SweepRow>> {
    if layer_counts.is_empty() {
        return Err(Error::Empty("no layer counts requested"));
    }
    layer_counts
        .iter()
        .map(|&layers| {
            let base = ModelConfig {
                n_layers: layers,
                ..setup.model.clone()
            };
            let prep = prepare_training(setup.catalog, setup.train, setup.table, &base, &setup.training, setup.init_seed)?;
            let params = prep.model.params.param_count();
            let mut trainer = Trainer::new(prep.model, setup.training.clone(), prep.examples)?;
            let rows = trainer.run(&mut |_| Ok(()))?;
            let avg = last_n_average(&rows, 100);
            log::info!("depth {layers}: {params} params, L_con {:.4}", avg.l_con);
            Ok(SweepRow {
                layers,
                params,
                metric_a: avg.hitrate,
                metric_b: avg.ndcg,
                loss: avg.l_con,
            })
        })
        .collect()
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
