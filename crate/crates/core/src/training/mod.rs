//! Joint training: logQ-corrected InfoNCE plus two semantic-ID
//! cross-entropies, AdamW with warmup and cosine decay, and gradient checks.

pub mod batch;
pub mod gradcheck;
pub mod loss;
pub mod optim;
pub mod popularity;
pub mod schedule;
pub mod trainer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use batch::{batch_step, build_examples, BatchResult, Example};
pub use gradcheck::{compare_gradients, grad_check, GradCheckOptions, GradCheckReport};
pub use loss::{infonce_logq_loss, sid_ce_losses, total_loss, LossBreakdown};
pub use optim::{adamw_step, AdamState, OptimizerConfig};
pub use popularity::{estimate_popularity, PopularityTable};
pub use schedule::{lr_at_step, Schedule};
pub use trainer::{last_n_average, MetricsRow, MetricsWriter, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub warmup_steps: u64,
    pub lr_min: f64,
    pub batch_size: usize,
    pub epochs: u64,
    /// Optional cap on optimizer steps across all epochs.
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub popularity_eps: f64,
    pub popularity_targets_only: bool,
    /// Fixed number of gradient partial sums per batch.
    pub grad_chunks: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            warmup_steps: 50,
            lr_min: 0.0,
            batch_size: 256,
            epochs: 1,
            max_steps: None,
            seed: 42,
            popularity_eps: 1.0,
            popularity_targets_only: false,
            grad_chunks: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 || self.epochs == 0 || self.grad_chunks == 0 {
            return Err(Error::invalid("batch_size, epochs and grad_chunks must be positive"));
        }
        if self.lr_min < 0.0 || self.lr_min > self.optimizer.lr {
            return Err(Error::invalid("lr_min must lie in [0, lr]"));
        }
        Ok(())
    }
}
