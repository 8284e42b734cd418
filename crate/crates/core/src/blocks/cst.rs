//! Context-sharing block.
//!
//! One spatial attention map `G = softmax_N(x·w_g)` is shared by every
//! query. It pools the tokens into a single context vector, which a
//! bottleneck transform `T2(relu(LN(T1(ctx))))` refines before it is added
//! to every token.

use crate::numerics::{flops, ops, DenseArray, Rng};

use super::ffn::{ffn_backward, ffn_forward, FfnCache};
use super::params::{param_struct, FfnParams, LayerNormParams, Linear};
use super::{BlockConfig, BlockError};
use crate::numerics::init_uniform;

#[derive(Debug, Clone, PartialEq)]
pub struct CstParams {
    pub norm1: LayerNormParams,
    /// Spatial attention head, `C × 1`.
    pub w_g: DenseArray,
    /// `C → C/r_c` with bias.
    pub t1: Linear,
    pub ctx_norm: LayerNormParams,
    /// `C/r_c → C` with bias.
    pub t2: Linear,
    pub norm2: LayerNormParams,
    pub ffn: FfnParams,
}
param_struct!(CstParams { norm1, w_g, t1, ctx_norm, t2, norm2, ffn });

impl CstParams {
    pub fn init(cfg: &BlockConfig, rng: &mut Rng) -> Self {
        let c = cfg.channels;
        let h = cfg.ctx_hidden();
        Self {
            norm1: LayerNormParams::new(c),
            w_g: init_uniform(&[c, 1], c, rng),
            t1: Linear::init(c, h, true, rng),
            ctx_norm: LayerNormParams::new(h),
            t2: Linear::init(h, c, true, rng),
            norm2: LayerNormParams::new(c),
            ffn: FfnParams::init(c, cfg.ffn_hidden(), rng),
        }
    }
}

/// Intermediates of the shared-context path.
#[derive(Debug, Clone)]
pub struct ContextCache {
    y: DenseArray,
    g: DenseArray,
    ctx: DenseArray,
    norm: ops::LayerNormCache,
    pre: DenseArray,
    act: DenseArray,
}

impl ContextCache {
    /// The spatial attention map `G` as an `N × 1` column summing to one.
    pub fn gmap(&self) -> &DenseArray {
        &self.g
    }

    /// Pooled context `Σ_i G_i·y_i`, `1 × C`.
    pub fn context(&self) -> &DenseArray {
        &self.ctx
    }
}

fn linear(x: &DenseArray, l: &Linear, mm: &'static str, bias: &'static str) -> Result<DenseArray, BlockError> {
    let y = {
        let _s = flops::scope(mm);
        ops::matmul(x, &l.weight)?
    };
    Ok(match &l.bias {
        Some(b) => {
            let _s = flops::scope(bias);
            ops::add_row(&y, b)?
        }
        None => y,
    })
}

/// The query-independent update `T2(relu(LN(T1(Gᵀy))))`, `1 × C`.
pub fn context_delta(y: &DenseArray, p: &CstParams) -> Result<(DenseArray, ContextCache), BlockError> {
    y.expect_rank("cst", 2)?;
    let logits = {
        let _s = flops::scope("spatial_head");
        ops::matmul(y, &p.w_g)?
    };
    let g = {
        let _s = flops::scope("spatial_softmax");
        ops::softmax(&logits, 0)?
    };
    let ctx = {
        let _s = flops::scope("context_pool");
        ops::matmul(&ops::transpose(&g)?, y)?
    };
    let t = linear(&ctx, &p.t1, "ctx_t1", "ctx_t1_bias")?;
    let (tn, norm) = {
        let _s = flops::scope("ctx_norm");
        ops::layernorm_forward(&t, &p.ctx_norm.gamma, &p.ctx_norm.beta, 1)?
    };
    let act = {
        let _s = flops::scope("ctx_relu");
        ops::relu(&tn)?
    };
    let delta = linear(&act, &p.t2, "ctx_t2", "ctx_t2_bias")?;
    Ok((
        delta,
        ContextCache {
            y: y.clone(),
            g,
            ctx,
            norm,
            pre: tn,
            act,
        },
    ))
}

/// Returns `(dy, grads)` for [`context_delta`]; only the context-path
/// fields of the gradient struct are filled.
fn context_delta_backward(
    cache: &ContextCache,
    p: &CstParams,
    d_delta: &DenseArray,
    grads: &mut CstParams,
) -> Result<DenseArray, BlockError> {
    grads.t2.weight = ops::matmul(&ops::transpose(&cache.act)?, d_delta)?;
    grads.t2.bias = Some(d_delta.reshape(&[d_delta.len()])?);
    let d_act = ops::matmul(d_delta, &ops::transpose(&p.t2.weight)?)?;
    let d_tn = ops::relu_backward(&cache.pre, &d_act)?;
    let (d_t, dg, db) = ops::layernorm_backward(&cache.norm, &p.ctx_norm.gamma, &d_tn)?;
    grads.ctx_norm = LayerNormParams { gamma: dg, beta: db };
    grads.t1.weight = ops::matmul(&ops::transpose(&cache.ctx)?, &d_t)?;
    grads.t1.bias = Some(d_t.reshape(&[d_t.len()])?);
    let d_ctx = ops::matmul(&d_t, &ops::transpose(&p.t1.weight)?)?;

    // ctx = Gᵀ y
    let mut dy = ops::matmul(&cache.g, &d_ctx)?;
    let d_g = ops::matmul(&cache.y, &ops::transpose(&d_ctx)?)?;
    let d_logits = ops::softmax_backward(&cache.g, &d_g, 0)?;
    grads.w_g = ops::matmul(&ops::transpose(&cache.y)?, &d_logits)?;
    ops::add_assign(&mut dy, &ops::matmul(&d_logits, &ops::transpose(&p.w_g)?)?)?;
    Ok(dy)
}

/// `x_i + delta(x)` for every token `i`.
pub fn cst_global_context(x: &DenseArray, p: &CstParams) -> Result<DenseArray, BlockError> {
    let (delta, _) = context_delta(x, p)?;
    let _s = flops::scope("broadcast_add");
    Ok(ops::add_row(x, &delta)?)
}

#[derive(Debug, Clone)]
pub struct CstCache {
    norm1: ops::LayerNormCache,
    context: ContextCache,
    ffn: FfnCache,
}

impl CstCache {
    pub fn context(&self) -> &ContextCache {
        &self.context
    }

    pub(crate) fn regime(&self, out: &mut Vec<bool>) {
        out.extend(self.context.pre.data().iter().map(|&v| v > 0.0));
        self.ffn.regime(out);
    }
}

pub(crate) fn cst_forward(x: &DenseArray, p: &CstParams) -> Result<(DenseArray, CstCache), BlockError> {
    x.expect_rank("cst_block", 2)?;
    let (y, norm1) = {
        let _s = flops::scope("norm1");
        ops::layernorm_forward(x, &p.norm1.gamma, &p.norm1.beta, 1)?
    };
    let (delta, context) = context_delta(&y, p)?;
    let x1 = {
        let _s = flops::scope("broadcast_add");
        ops::add_row(x, &delta)?
    };
    let (out, ffn) = ffn_forward(&x1, &p.norm2, &p.ffn)?;
    Ok((out, CstCache { norm1, context, ffn }))
}

/// The shared-context sub-layer followed by the FFN sub-layer.
pub fn cst_block_forward(x: &DenseArray, p: &CstParams) -> Result<DenseArray, BlockError> {
    cst_forward(x, p).map(|(y, _)| y)
}

pub(crate) fn cst_backward(
    cache: &CstCache,
    p: &CstParams,
    d_out: &DenseArray,
) -> Result<(DenseArray, CstParams), BlockError> {
    let mut grads = p.clone();
    let (mut dx, d_norm2, d_ffn) = ffn_backward(&cache.ffn, &p.norm2, &p.ffn, d_out)?;
    grads.norm2 = d_norm2;
    grads.ffn = d_ffn;
    let d_delta = ops::sum_rows(&dx)?;
    let d_delta = d_delta.reshape(&[1, d_delta.len()])?;
    let dy = context_delta_backward(&cache.context, p, &d_delta, &mut grads)?;
    let (d_from_norm, dg, db) = ops::layernorm_backward(&cache.norm1, &p.norm1.gamma, &dy)?;
    grads.norm1 = LayerNormParams { gamma: dg, beta: db };
    ops::add_assign(&mut dx, &d_from_norm)?;
    Ok((dx, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::ParamSet;

    fn setup(seed: u64, n: usize, c: usize) -> (CstParams, DenseArray) {
        let mut rng = Rng::new(seed);
        let cfg = BlockConfig::new(c, n);
        let p = CstParams::init(&cfg, &mut rng);
        (p, DenseArray::uniform(&[n, c], -1.0, 1.0, &mut rng))
    }

    #[test]
    fn zero_head_pools_the_mean_token() {
        let (mut p, x) = setup(1, 6, 8);
        p.w_g.fill(0.0);
        let (_, cache) = context_delta(&x, &p).unwrap();
        let mean = ops::scale(&ops::sum_rows(&x).unwrap(), 1.0 / 6.0).unwrap();
        for (a, b) in cache.context().data().iter().zip(mean.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(cache.gmap().data().iter().all(|&g| (g - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn zero_t2_is_skip_identity() {
        let (mut p, x) = setup(2, 5, 8);
        p.t2.zero();
        assert!(cst_global_context(&x, &p).unwrap().bit_eq(&x));
    }

    #[test]
    fn delta_identical_across_tokens() {
        let (p, x) = setup(3, 7, 8);
        let out = cst_global_context(&x, &p).unwrap();
        let (delta, _) = context_delta(&x, &p).unwrap();
        for i in 0..7 {
            for (j, (a, b)) in out.row(i).iter().zip(x.row(i)).enumerate() {
                assert_eq!(a.to_bits(), (b + delta.data()[j]).to_bits());
            }
        }
    }

    #[test]
    fn zero_input_finite_output() {
        let (p, _) = setup(4, 5, 8);
        let y = cst_block_forward(&DenseArray::zeros(&[5, 8]), &p).unwrap();
        assert!(y.data().iter().all(|v| v.is_finite()));
    }
}
