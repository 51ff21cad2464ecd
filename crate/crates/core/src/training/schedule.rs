//! Linear warmup followed by cosine decay.

use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub peak_lr: f64,
    pub lr_min: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

pub fn lr_at_step(step: u64, s: &Schedule) -> f64 {
    if step < s.warmup_steps {
        return s.peak_lr * step as f64 / s.warmup_steps as f64;
    }
    if step >= s.total_steps {
        return if s.total_steps <= s.warmup_steps && step == s.warmup_steps {
            s.peak_lr
        } else {
            s.lr_min
        };
    }
    let progress = (step - s.warmup_steps) as f64 / (s.total_steps - s.warmup_steps) as f64;
    s.lr_min + 0.5 * (s.peak_lr - s.lr_min) * (1.0 + (PI * progress).cos())
}
