//! Baseline Transformer block: `x1 = x + MHSA(LN1(x))`, `y = x1 + FFN(LN2(x1))`.

use crate::numerics::{flops, ops, DenseArray, Rng};

use super::attention::{mhsa_backward, mhsa_forward, AttentionCache};
use super::ffn::{ffn_backward, ffn_forward, FfnCache};
use super::params::{param_struct, AttentionParams, FfnParams, LayerNormParams};
use super::{BlockConfig, BlockError};

#[derive(Debug, Clone, PartialEq)]
pub struct VanillaParams {
    pub norm1: LayerNormParams,
    pub attn: AttentionParams,
    pub norm2: LayerNormParams,
    pub ffn: FfnParams,
    /// Head count; structural, not trained.
    pub heads: usize,
}
param_struct!(VanillaParams { norm1, attn, norm2, ffn });

impl VanillaParams {
    pub fn init(cfg: &BlockConfig, rng: &mut Rng) -> Self {
        let c = cfg.channels;
        Self {
            norm1: LayerNormParams::new(c),
            attn: AttentionParams::init(c, rng),
            norm2: LayerNormParams::new(c),
            ffn: FfnParams::init(c, cfg.ffn_hidden(), rng),
            heads: cfg.heads,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VanillaCache {
    norm1: ops::LayerNormCache,
    attn: AttentionCache,
    ffn: FfnCache,
}

impl VanillaCache {
    pub fn attention(&self) -> &AttentionCache {
        &self.attn
    }

    pub(crate) fn regime(&self, out: &mut Vec<bool>) {
        self.ffn.regime(out);
    }
}

pub(crate) fn vanilla_forward(
    x: &DenseArray,
    p: &VanillaParams,
    _cfg: &BlockConfig,
) -> Result<(DenseArray, VanillaCache), BlockError> {
    x.expect_rank("vanilla_block", 2)?;
    let (y, norm1) = {
        let _s = flops::scope("norm1");
        ops::layernorm_forward(x, &p.norm1.gamma, &p.norm1.beta, 1)?
    };
    let (a, attn) = mhsa_forward(&y, &p.attn, p.heads)?;
    let x1 = {
        let _s = flops::scope("residual1");
        ops::add(x, &a)?
    };
    let (out, ffn) = ffn_forward(&x1, &p.norm2, &p.ffn)?;
    Ok((out, VanillaCache { norm1, attn, ffn }))
}

pub fn vanilla_block_forward(x: &DenseArray, p: &VanillaParams) -> Result<DenseArray, BlockError> {
    let cfg = BlockConfig::new(x.cols(), x.rows());
    vanilla_forward(x, p, &cfg).map(|(y, _)| y)
}

pub(crate) fn vanilla_backward(
    cache: &VanillaCache,
    p: &VanillaParams,
    d_out: &DenseArray,
) -> Result<(DenseArray, VanillaParams), BlockError> {
    let (mut dx, d_norm2, d_ffn) = ffn_backward(&cache.ffn, &p.norm2, &p.ffn, d_out)?;
    let (dy, d_attn) = mhsa_backward(&cache.attn, &p.attn, &dx)?;
    let (d_from_norm, d_gamma, d_beta) = ops::layernorm_backward(&cache.norm1, &p.norm1.gamma, &dy)?;
    ops::add_assign(&mut dx, &d_from_norm)?;
    Ok((
        dx,
        VanillaParams {
            norm1: LayerNormParams {
                gamma: d_gamma,
                beta: d_beta,
            },
            attn: d_attn,
            norm2: d_norm2,
            ffn: d_ffn,
            heads: p.heads,
        },
    ))
}
