//! Four-stage fusion network: per-stage mixing and fusion blocks, a toy
//! decoder, binary cross-entropy, AdamW and synthetic training clips.

mod config;
pub mod loss;
pub mod model;
pub mod optim;
pub mod synth;
pub mod train;

pub use config::{IsomerConfig, RunConfig, TrainConfig, STAGES};
pub use loss::{bce_grad, bce_loss, iou};
pub use model::{decode, isomer_fuse, isomer_fuse_ordered, IsomerParams, StageStack};
pub use optim::{AdamW, AdamWConfig};
pub use synth::{synth_clip, Clip, Frame, Scene};
pub use train::{evaluate, train, train_step, MetricRow, TrainOutcome};

use crate::blocks::BlockError;
use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Block(#[from] BlockError),
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error("target value {value} at index {index} is not 0 or 1")]
    Target { index: usize, value: f64 },
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
}

impl From<NumericsError> for PipelineError {
    fn from(e: NumericsError) -> Self {
        PipelineError::Block(BlockError::Numerics(e))
    }
}
