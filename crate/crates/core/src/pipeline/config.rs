use serde::{Deserialize, Serialize};

use crate::blocks::{BlockConfig, BlockKind, MergeNorm, MergeRatio};

use super::PipelineError;

pub const STAGES: usize = 4;

/// Network shape: per-stage block kinds and widths, plus block options
/// shared by every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IsomerConfig {
    /// Input side length in pixels; stage 1 is `ceil(resolution / 4)` wide.
    pub resolution: usize,
    pub assignment: [BlockKind; STAGES],
    pub channels: [usize; STAGES],
    pub heads: usize,
    pub ffn_ratio: usize,
    pub ctx_reduction: usize,
    pub merge_ratio: MergeRatio,
    pub merge_norm: MergeNorm,
    pub fg_only: bool,
    pub decoder_width: usize,
}

impl Default for IsomerConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            assignment: [BlockKind::Cst, BlockKind::Cst, BlockKind::Sgst, BlockKind::Sgst],
            channels: [8, 8, 16, 16],
            heads: 1,
            ffn_ratio: 4,
            ctx_reduction: 4,
            merge_ratio: MergeRatio::ONE_NINTH,
            merge_norm: MergeNorm::Softmax,
            fg_only: false,
            decoder_width: 8,
        }
    }
}

impl IsomerConfig {
    /// Side length of every stage: `ceil(res/4)`, then halved with ceiling.
    pub fn stage_sides(&self) -> [usize; STAGES] {
        let mut out = [0; STAGES];
        let mut s = self.resolution.div_ceil(4);
        for o in out.iter_mut() {
            *o = s;
            s = s.div_ceil(2);
        }
        out
    }

    pub fn block_config(&self, stage: usize) -> BlockConfig {
        let side = self.stage_sides()[stage];
        let mut b = BlockConfig::new(self.channels[stage], side * side);
        b.heads = self.heads;
        b.ffn_ratio = self.ffn_ratio;
        b.ctx_reduction = self.ctx_reduction;
        b.merge_ratio = self.merge_ratio;
        b.merge_norm = self.merge_norm;
        b.fg_only = self.fg_only;
        b
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.resolution == 0 {
            return Err(PipelineError::Config("resolution must be positive".into()));
        }
        if self.decoder_width == 0 {
            return Err(PipelineError::Config("decoder_width must be positive".into()));
        }
        for s in 0..STAGES {
            self.block_config(s)
                .validate()
                .map_err(|e| PipelineError::Config(format!("stage {}: {e}", s + 1)))?;
        }
        Ok(())
    }
}

/// Optimizer and data settings of the toy trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub frames: usize,
    /// Seeds parameter init.
    pub seed: u64,
    /// Seeds the synthetic clip.
    pub clip_seed: u64,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-3,
            weight_decay: 0.01,
            frames: 4,
            seed: 0,
            clip_seed: 0,
            checkpoint_every: 0,
        }
    }
}

/// Complete run configuration as read from a TOML file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: IsomerConfig,
    pub train: TrainConfig,
}
