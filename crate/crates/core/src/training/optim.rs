//! AdamW with bias correction and decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{cst, Float, ModelConfig, Params};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub name: String,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            name: "adamw".into(),
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.name != "adamw" {
            return Err(Error::invalid(format!("unsupported optimizer {:?}; only adamw is available", self.name)));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::invalid("lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("betas must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 || self.eps <= 0.0 {
            return Err(Error::invalid("weight_decay must be >= 0 and eps > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub m: Params<F>,
    pub v: Params<F>,
    pub t: u64,
}

impl<F: Float> AdamState<F> {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            m: Params::zeros(cfg),
            v: Params::zeros(cfg),
            t: 0,
        }
    }
}

/// One AdamW update at learning rate `lr`. Tensors for which `frozen`
/// returns true are left untouched. Any non-finite gradient aborts the
/// step before anything is modified.
pub fn adamw_step<F: Float>(
    params: &mut Params<F>,
    grads: &Params<F>,
    state: &mut AdamState<F>,
    lr: f64,
    cfg: &OptimizerConfig,
    frozen: &dyn Fn(&str) -> bool,
) -> Result<()> {
    for (name, g) in grads.named() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(name));
        }
    }
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    let (b1, b2) = (cst::<F>(cfg.beta1), cst::<F>(cfg.beta2));
    let (one_b1, one_b2) = (cst::<F>(1.0 - cfg.beta1), cst::<F>(1.0 - cfg.beta2));
    let (inv_bc1, inv_bc2) = (cst::<F>(1.0 / bc1), cst::<F>(1.0 / bc2));
    let (lr_f, wd, eps) = (cst::<F>(lr), cst::<F>(cfg.weight_decay), cst::<F>(cfg.eps));
    let p_views = params.named_mut();
    let m_views = state.m.named_mut();
    let v_views = state.v.named_mut();
    for (((name, mut p), (_, mut m)), ((_, mut v), (_, g))) in
        p_views.into_iter().zip(m_views).zip(v_views.into_iter().zip(grads.named()))
    {
        if frozen(&name) {
            continue;
        }
        ndarray::Zip::from(&mut p).and(&mut m).and(&mut v).and(&g).for_each(|p, m, v, &g| {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let m_hat = *m * inv_bc1;
            let v_hat = *v * inv_bc2;
            *p = *p - lr_f * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
        });
    }
    Ok(())
}
