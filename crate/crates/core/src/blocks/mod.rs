//! The three fusion blocks, their parameter schemas and backward passes.
//!
//! Blocks act on the `N × C` token view of a stage feature. All of them are
//! pre-norm: `x + Mixer(LN(x))` followed by `x + FFN(LN(x))`, where the
//! token mixer is multi-head self-attention ([`vanilla`]), a broadcast
//! global context ([`cst`]) or routed cross-attention over soft-merged
//! keys ([`sgst`]).

pub mod attention;
pub mod checkpoint;
mod config;
pub mod cst;
mod feature_map;
pub mod ffn;
mod mix;
pub mod params;
pub mod sgst;
pub mod vanilla;

pub use attention::{mhsa_backward, mhsa_forward, AttentionCache};
pub use config::{BlockConfig, BlockKind, MergeNorm, MergeRatio};
pub use cst::{cst_block_forward, cst_global_context, CstParams};
pub use feature_map::FeatureMap;
pub use mix::{mix, mix_backward, mix_tokens, MixParams};
pub use params::{AttentionParams, FfnParams, LayerNormParams, Linear, ParamSet};
pub use sgst::{
    sgst_block_forward, sgst_block_forward_with_heatmap, sgst_branch_attend, sgst_cross_attend, sgst_gather, sgst_scatter,
    sgst_soft_merge, Branch, GatherPlan, SgstParams,
};
pub use vanilla::{vanilla_block_forward, VanillaParams};

use crate::numerics::{DenseArray, NumericsError, Rng};

#[derive(Debug, thiserror::Error)]
pub enum BlockError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape mismatch for {what}: expected {expected:?}, got {actual:?}")]
    Shape {
        what: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("{what}: expected {expected} rows, got {actual}")]
    RowCount {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error("checkpoint tensor '{name}' does not match: expected {expected}, found {found}")]
    TensorMismatch {
        name: String,
        expected: String,
        found: String,
    },
}

/// Parameters of any one block kind.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockParams {
    Vanilla(VanillaParams),
    Cst(CstParams),
    Sgst(SgstParams),
}

impl BlockParams {
    pub fn init(kind: BlockKind, cfg: &BlockConfig, rng: &mut Rng) -> Result<Self, BlockError> {
        cfg.validate()?;
        Ok(match kind {
            BlockKind::Vanilla => BlockParams::Vanilla(VanillaParams::init(cfg, rng)),
            BlockKind::Cst => BlockParams::Cst(CstParams::init(cfg, rng)),
            BlockKind::Sgst => BlockParams::Sgst(SgstParams::init(cfg, rng)),
        })
    }

    pub fn kind(&self) -> BlockKind {
        match self {
            BlockParams::Vanilla(_) => BlockKind::Vanilla,
            BlockParams::Cst(_) => BlockKind::Cst,
            BlockParams::Sgst(_) => BlockKind::Sgst,
        }
    }
}

impl ParamSet for BlockParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a DenseArray)) {
        match self {
            BlockParams::Vanilla(p) => p.visit(prefix, f),
            BlockParams::Cst(p) => p.visit(prefix, f),
            BlockParams::Sgst(p) => p.visit(prefix, f),
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut DenseArray)) {
        match self {
            BlockParams::Vanilla(p) => p.visit_mut(prefix, f),
            BlockParams::Cst(p) => p.visit_mut(prefix, f),
            BlockParams::Sgst(p) => p.visit_mut(prefix, f),
        }
    }
}

/// Forward intermediates of any one block kind.
#[derive(Debug, Clone)]
pub enum BlockCache {
    Vanilla(vanilla::VanillaCache),
    Cst(cst::CstCache),
    Sgst(sgst::SgstCache),
}

impl BlockCache {
    /// Discrete state of the forward pass: ReLU sign patterns and, for the
    /// gathering block, the routing. Two evaluations with equal regimes lie
    /// on the same smooth piece of the block function.
    pub fn regime(&self) -> Vec<bool> {
        let mut out = Vec::new();
        match self {
            BlockCache::Vanilla(c) => c.regime(&mut out),
            BlockCache::Cst(c) => c.regime(&mut out),
            BlockCache::Sgst(c) => c.regime(&mut out),
        }
        out
    }

    /// SGST token routing (`true` = foreground); empty for other kinds.
    pub fn routing(&self) -> Vec<bool> {
        match self {
            BlockCache::Sgst(c) => c.plan().mask().to_vec(),
            _ => Vec::new(),
        }
    }
}

pub fn block_forward(
    x: &DenseArray,
    params: &BlockParams,
    cfg: &BlockConfig,
) -> Result<(DenseArray, BlockCache), BlockError> {
    Ok(match params {
        BlockParams::Vanilla(p) => {
            let (y, c) = vanilla::vanilla_forward(x, p, cfg)?;
            (y, BlockCache::Vanilla(c))
        }
        BlockParams::Cst(p) => {
            let (y, c) = cst::cst_forward(x, p)?;
            (y, BlockCache::Cst(c))
        }
        BlockParams::Sgst(p) => {
            let (y, c) = sgst::sgst_forward(x, p, cfg, None)?;
            (y, BlockCache::Sgst(c))
        }
    })
}

/// Returns `(dx, parameter gradients)`.
pub fn block_backward(
    cache: &BlockCache,
    params: &BlockParams,
    d_out: &DenseArray,
) -> Result<(DenseArray, BlockParams), BlockError> {
    match (cache, params) {
        (BlockCache::Vanilla(c), BlockParams::Vanilla(p)) => {
            let (dx, g) = vanilla::vanilla_backward(c, p, d_out)?;
            Ok((dx, BlockParams::Vanilla(g)))
        }
        (BlockCache::Cst(c), BlockParams::Cst(p)) => {
            let (dx, g) = cst::cst_backward(c, p, d_out)?;
            Ok((dx, BlockParams::Cst(g)))
        }
        (BlockCache::Sgst(c), BlockParams::Sgst(p)) => {
            let (dx, g) = sgst::sgst_backward(c, p, d_out)?;
            Ok((dx, BlockParams::Sgst(g)))
        }
        _ => Err(BlockError::Config(
            "cache and parameters belong to different block kinds".into(),
        )),
    }
}
