//! Pre-norm feed-forward sub-layer: `out = x + FFN(LN(x))`.

use crate::numerics::{flops, ops, DenseArray};

use super::params::{FfnParams, LayerNormParams};
use super::BlockError;

#[derive(Debug, Clone)]
pub struct FfnCache {
    norm: ops::LayerNormCache,
    z: DenseArray,
    pre: DenseArray,
    act: DenseArray,
}

impl FfnCache {
    /// ReLU sign pattern; changes mark non-differentiable neighbourhoods.
    pub fn regime(&self, out: &mut Vec<bool>) {
        out.extend(self.pre.data().iter().map(|&v| v > 0.0));
    }
}

pub fn ffn_forward(
    x: &DenseArray,
    norm: &LayerNormParams,
    p: &FfnParams,
) -> Result<(DenseArray, FfnCache), BlockError> {
    let (z, norm_cache) = {
        let _s = flops::scope("norm2");
        ops::layernorm_forward(x, &norm.gamma, &norm.beta, 1)?
    };
    let pre = {
        let _s = flops::scope("ffn_w1");
        ops::matmul(&z, &p.w1)?
    };
    let pre = {
        let _s = flops::scope("ffn_b1");
        ops::add_row(&pre, &p.b1)?
    };
    let act = {
        let _s = flops::scope("ffn_relu");
        ops::relu(&pre)?
    };
    let f = {
        let _s = flops::scope("ffn_w2");
        ops::matmul(&act, &p.w2)?
    };
    let f = {
        let _s = flops::scope("ffn_b2");
        ops::add_row(&f, &p.b2)?
    };
    let out = {
        let _s = flops::scope("residual2");
        ops::add(x, &f)?
    };
    Ok((
        out,
        FfnCache {
            norm: norm_cache,
            z,
            pre,
            act,
        },
    ))
}

/// Returns `(dx, norm grads, ffn grads)`.
pub fn ffn_backward(
    cache: &FfnCache,
    norm: &LayerNormParams,
    p: &FfnParams,
    d_out: &DenseArray,
) -> Result<(DenseArray, LayerNormParams, FfnParams), BlockError> {
    let d_b2 = ops::sum_rows(d_out)?;
    let d_w2 = ops::matmul(&ops::transpose(&cache.act)?, d_out)?;
    let d_act = ops::matmul(d_out, &ops::transpose(&p.w2)?)?;
    let d_pre = ops::relu_backward(&cache.pre, &d_act)?;
    let d_b1 = ops::sum_rows(&d_pre)?;
    let d_w1 = ops::matmul(&ops::transpose(&cache.z)?, &d_pre)?;
    let d_z = ops::matmul(&d_pre, &ops::transpose(&p.w1)?)?;
    let (d_x_norm, d_gamma, d_beta) = ops::layernorm_backward(&cache.norm, &norm.gamma, &d_z)?;
    let mut dx = d_out.clone();
    ops::add_assign(&mut dx, &d_x_norm)?;
    Ok((
        dx,
        LayerNormParams {
            gamma: d_gamma,
            beta: d_beta,
        },
        FfnParams {
            w1: d_w1,
            b1: d_b1,
            w2: d_w2,
            b2: d_b2,
        },
    ))
}
