//! Batching, loss, gradients, AdamW and the early-stopped training loop.

mod backward;
mod batch;
mod optim;
mod trainer;

pub use backward::{backward, loss, Gradients};
pub use batch::{batchify, encode_example, Batch, Batches, EncodedExample};
pub use optim::{grad_norm, optimizer_step, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use trainer::{early_stop, evaluate_loss, train_loop, MetricRecord, MetricsWriter, TrainOutcome};

pub(crate) use backward::{batch_pass, sequence_pass, GradPlan, SeqWork};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub context_len: usize,
    pub early_stop_patience: usize,
    /// Steps between validation passes; `None` means four passes per epoch.
    pub eval_interval: Option<usize>,
    pub grad_clip: Option<f64>,
    pub weight_decay: f64,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    /// Train on every non-pad target instead of completion tokens only.
    pub full_sequence_loss: bool,
    /// Fixed-order gradient reduction, independent of thread count.
    pub bit_exact: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-5,
            batch_size: 32,
            epochs: 5,
            context_len: 350,
            early_stop_patience: 3,
            eval_interval: None,
            grad_clip: Some(1.0),
            weight_decay: 0.1,
            max_steps: None,
            full_sequence_loss: false,
            bit_exact: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.learning_rate > 0.0) {
            bad.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("context_len", self.context_len),
            ("early_stop_patience", self.early_stop_patience),
        ] {
            if v == 0 {
                bad.push(format!("{name} must be at least 1"));
            }
        }
        if self.eval_interval == Some(0) {
            bad.push("eval_interval must be at least 1".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                bad.push(format!("grad_clip must be positive, got {c}"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            bad.push(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}
