//! Training configuration, optimisation and the two-stage run loop.

mod checkpoint;
mod config;
mod harness;
mod optim;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{RouterKind, TrainConfig};
pub use harness::{MetricRecord, TrainReport, Trainer};
pub use optim::{adam_step, adam_step_with, clip_gradients, global_grad_norm, lr_schedule, AdamConfig, ClipOutcome, OptimizerState};
