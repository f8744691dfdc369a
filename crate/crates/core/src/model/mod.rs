//! The multi-branch network, its loss, the Adam optimizer, the training loop
//! and checkpoints.
//!
//! Each enabled branch runs two stacked Gabor layers and an attention block.
//! The branch attention outputs are fused by the across-scale competition;
//! the head pools that fused map and every branch's inner-scale map over
//! space, maps the pooled vector linearly to an embedding, and maps the
//! embedding (before its L2 normalization) linearly to class logits.

mod checkpoint;
pub mod config;
mod loss;
mod net;
mod optim;
mod train;

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{DataConfig, DataSource, KvMap, ModelConfig, RunConfig, Scale};
pub use loss::{contrastive, cross_entropy, loss, LossOutput, LossWeights, PairPlan};
pub use net::{argmax_rows, ForwardOutput, Head, SacNet};
pub use optim::{Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use train::{
    accuracy, epoch_checkpoint_path, plan_epoch, resolve_classes, train, PlannedBatch, StepRecord, TrainOptions,
    TrainSummary, Trainer, METRICS_HEADER,
};
