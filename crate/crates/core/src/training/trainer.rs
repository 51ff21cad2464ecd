//! Epoch loop, metrics log and resumable state.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::batch::{batch_step, Example};
use super::loss::LossBreakdown;
use super::optim::{adamw_step, AdamState};
use super::schedule::{lr_at_step, Schedule};
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::checkpoint::{save_checkpoint, Checkpoint};
use crate::model::Model;
use crate::rng::{PortableRng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    /// Number of optimizer updates applied, counting this one.
    pub step: u64,
    pub epoch: u64,
    pub loss: LossBreakdown,
    pub lr: f64,
    pub gini: Vec<f64>,
}

pub fn metrics_header(n_layers: usize) -> Vec<String> {
    let mut h: Vec<String> = ["step", "epoch", "L_con", "L_c1", "L_c2", "L_total", "hitrate", "ndcg", "lr"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((0..n_layers).map(|l| format!("gini_layer_{l}")));
    h
}

impl MetricsRow {
    pub fn record(&self) -> Vec<String> {
        let l = &self.loss;
        let mut r = vec![self.step.to_string(), self.epoch.to_string()];
        r.extend([l.l_con, l.l_c1, l.l_c2, l.l_total, l.hitrate, l.ndcg, self.lr].iter().map(|v| v.to_string()));
        r.extend(self.gini.iter().map(|g| g.to_string()));
        r
    }
}

/// CSV sink for [`MetricsRow`]s.
pub struct MetricsWriter {
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path, n_gini_layers: usize) -> Result<Self> {
        let mut inner = csv::Writer::from_path(path)?;
        inner.write_record(metrics_header(n_gini_layers))?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.write_record(row.record())?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush().map_err(|e| Error::io("metrics csv", e))
    }
}

/// Mean of the last `n` rows' losses and diagnostics.
pub fn last_n_average(rows: &[MetricsRow], n: usize) -> LossBreakdown {
    let tail = &rows[rows.len().saturating_sub(n)..];
    let k = tail.len().max(1) as f64;
    let mut out = LossBreakdown::default();
    for r in tail {
        out.l_con += r.loss.l_con / k;
        out.l_c1 += r.loss.l_c1 / k;
        out.l_c2 += r.loss.l_c2 / k;
        out.l_total += r.loss.l_total / k;
        out.aux += r.loss.aux / k;
        out.hitrate += r.loss.hitrate / k;
        out.ndcg += r.loss.ndcg / k;
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SavedState {
    train: TrainConfig,
    adam_t: u64,
}

pub struct Trainer {
    pub model: Model<f32>,
    pub opt: AdamState<f32>,
    pub config: TrainConfig,
    examples: Vec<Example>,
    pub step: u64,
    order_cache: Option<(u64, Vec<usize>)>,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig, examples: Vec<Example>) -> Result<Self> {
        config.validate()?;
        if examples.len() < config.batch_size {
            return Err(Error::invalid(format!(
                "{} training examples cannot fill one batch of {}",
                examples.len(),
                config.batch_size
            )));
        }
        let opt = AdamState::new(&model.config);
        Ok(Self {
            model,
            opt,
            config,
            examples,
            step: 0,
            order_cache: None,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::save`]; the next
    /// step sees exactly the batch and optimizer state it would have seen.
    pub fn resume(ck: Checkpoint, config: TrainConfig, examples: Vec<Example>) -> Result<Self> {
        let saved: SavedState = serde_json::from_value(ck.state.clone())?;
        let mut t = Self::new(ck.model, config, examples)?;
        let (Some(m), Some(v)) = (ck.groups.get("adam_m"), ck.groups.get("adam_v")) else {
            return Err(Error::invalid("checkpoint has no optimizer state"));
        };
        t.opt = AdamState {
            m: m.clone(),
            v: v.clone(),
            t: saved.adam_t,
        };
        t.step = ck.step;
        Ok(t)
    }

    pub fn steps_per_epoch(&self) -> u64 {
        (self.examples.len() / self.config.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        let full = self.steps_per_epoch() * self.config.epochs;
        self.config.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            peak_lr: self.config.optimizer.lr,
            lr_min: self.config.lr_min,
            warmup_steps: self.config.warmup_steps,
            total_steps: self.total_steps(),
        }
    }

    pub fn epoch(&self) -> u64 {
        self.step / self.steps_per_epoch()
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    /// Example order for an epoch, derived from the seed and epoch number only.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.examples.len()).collect();
        PortableRng::with_index(self.config.seed, Stream::Shuffle, epoch).shuffle(&mut order);
        order
    }

    fn frozen(&self) -> impl Fn(&str) -> bool {
        let (f1, f2) = (self.model.config.lambda1 == 0.0, self.model.config.lambda2 == 0.0);
        move |name: &str| (f1 && name.starts_with("sid1.")) || (f2 && name.starts_with("sid2."))
    }

    pub fn train_step(&mut self) -> Result<MetricsRow> {
        let epoch = self.epoch();
        if self.order_cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
            self.order_cache = Some((epoch, self.epoch_order(epoch)));
        }
        let order = &self.order_cache.as_ref().expect("just filled").1;
        let bs = self.config.batch_size;
        let start = (self.step % self.steps_per_epoch()) as usize * bs;
        let batch: Vec<&Example> = order[start..start + bs].iter().map(|&i| &self.examples[i]).collect();
        let result = batch_step(&self.model, &batch, None, true, self.config.grad_chunks)?;
        let lr = lr_at_step(self.step, &self.schedule());
        let grads = result.grads.expect("gradients requested");
        let frozen = self.frozen();
        adamw_step(&mut self.model.params, &grads, &mut self.opt, lr, &self.config.optimizer, &frozen)?;
        self.step += 1;
        Ok(MetricsRow {
            step: self.step,
            epoch,
            loss: result.breakdown,
            lr,
            gini: result.stats.gini(),
        })
    }

    /// Runs until the end of the current epoch (or the step budget).
    pub fn train_epoch(&mut self, sink: &mut dyn FnMut(&MetricsRow) -> Result<()>) -> Result<Vec<MetricsRow>> {
        let epoch = self.epoch();
        let mut rows = Vec::new();
        while !self.is_done() && self.epoch() == epoch {
            let row = self.train_step()?;
            sink(&row)?;
            rows.push(row);
        }
        Ok(rows)
    }

    pub fn run(&mut self, sink: &mut dyn FnMut(&MetricsRow) -> Result<()>) -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::new();
        while !self.is_done() {
            rows.extend(self.train_epoch(sink)?);
        }
        Ok(rows)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let state = serde_json::to_value(SavedState {
            train: self.config.clone(),
            adam_t: self.opt.t,
        })?;
        save_checkpoint(
            dir,
            &self.model,
            &[("adam_m", &self.opt.m), ("adam_v", &self.opt.v)],
            self.step,
            self.epoch(),
            state,
        )
    }
}

/// Writes rows to any `Write` as CSV, for callers not using a file path.
pub fn write_metrics<W: Write>(out: W, n_gini_layers: usize, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(metrics_header(n_gini_layers))?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush().map_err(|e| Error::io("metrics csv", e))
}
