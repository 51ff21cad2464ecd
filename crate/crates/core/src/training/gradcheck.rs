//! Analytic gradients against central finite differences in `f64`.

use super::batch::{batch_step, Example};
use crate::error::{Error, Result};
use crate::model::{Model, Params, RowRouting};
use crate::rng::{PortableRng, Stream};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Entries checked per tensor; `None` checks every entry.
    pub max_per_tensor: Option<usize>,
    /// Denominator floor for the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_per_tensor: None,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<String> {
        self.tensors
            .iter()
            .filter(|t| t.max_rel_error.is_nan() || t.max_rel_error >= self.tolerance)
            .map(|t| format!("{} ({:.3e})", t.name, t.max_rel_error))
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn ensure(self) -> Result<Self> {
        let f = self.failures();
        if f.is_empty() {
            Ok(self)
        } else {
            Err(Error::GradCheck(f))
        }
    }
}

fn entry_mut(p: &mut Params<f64>, tensor: usize, idx: usize) -> &mut f64 {
    p.named_mut().swap_remove(tensor).1.into_iter().nth(idx).expect("index in range")
}

fn entry(p: &mut Params<f64>, tensor: usize, idx: usize) -> f64 {
    *entry_mut(p, tensor, idx)
}

pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares `analytic` with finite differences of the batch objective, with
/// MoE routing pinned to `routing`.
pub fn compare_gradients(
    model: &Model<f64>,
    batch: &[&Example],
    routing: &[RowRouting],
    analytic: &Params<f64>,
    tolerance: f64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut probe = model.clone();
    let mut rng = PortableRng::new(opts.seed, Stream::Test);
    let objective = |m: &Model<f64>| -> Result<f64> { Ok(batch_step(m, batch, Some(routing), false, 1)?.objective()) };
    let shapes: Vec<(String, usize)> = analytic.named().into_iter().map(|(n, t)| (n, t.len())).collect();
    let mut tensors = Vec::with_capacity(shapes.len());
    for (ti, (name, len)) in shapes.into_iter().enumerate() {
        let indices: Vec<usize> = match opts.max_per_tensor {
            Some(m) if m < len => {
                let mut all: Vec<usize> = (0..len).collect();
                rng.shuffle(&mut all);
                all.truncate(m);
                all.sort_unstable();
                all
            }
            _ => (0..len).collect(),
        };
        let grad_t = analytic.named().swap_remove(ti).1;
        let grad: Vec<f64> = grad_t.iter().copied().collect();
        let mut worst: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for &idx in &indices {
            let original = entry(&mut probe.params, ti, idx);
            *entry_mut(&mut probe.params, ti, idx) = original + opts.step;
            let plus = objective(&probe)?;
            *entry_mut(&mut probe.params, ti, idx) = original - opts.step;
            let minus = objective(&probe)?;
            *entry_mut(&mut probe.params, ti, idx) = original;
            let numeric = (plus - minus) / (2.0 * opts.step);
            worst = worst.max(relative_error(grad[idx], numeric, opts.floor));
            max_abs = max_abs.max(grad[idx].abs());
        }
        tensors.push(TensorCheck {
            name,
            checked: indices.len(),
            max_rel_error: worst,
            max_abs_grad: max_abs,
        });
    }
    Ok(GradCheckReport { tensors, tolerance })
}

/// Full check: analytic gradients from the batch, compared entry by entry.
/// Fails with the offending tensor names when any error reaches `tolerance`.
pub fn grad_check(
    model: &Model<f64>,
    batch: &[&Example],
    tolerance: f64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let first = batch_step(model, batch, None, true, 1)?;
    let analytic = first.grads.expect("gradients requested");
    compare_gradients(model, batch, &first.routing, &analytic, tolerance, opts)?.ensure()
}
