//! Multi-head scaled dot-product attention with bias-free projections.
//!
//! Queries come from `q_in[M×C]`, keys and values from `kv_in[P×C]`.
//! Self-attention passes the same tokens for both. Each head uses a
//! contiguous `C/heads` column block and the scale `1/√(C/heads)`.

use crate::numerics::{flops, ops, DenseArray};

use super::params::AttentionParams;
use super::BlockError;

#[derive(Debug, Clone)]
pub struct AttentionCache {
    q_in: DenseArray,
    kv_in: DenseArray,
    heads: usize,
    scale: f64,
    q: Vec<DenseArray>,
    k: Vec<DenseArray>,
    v: Vec<DenseArray>,
    probs: Vec<DenseArray>,
    concat: DenseArray,
}

impl AttentionCache {
    /// Per-head attention matrices, each `M × P` with rows summing to one.
    pub fn probs(&self) -> &[DenseArray] {
        &self.probs
    }
}

pub struct AttentionGrads {
    pub d_q_in: DenseArray,
    pub d_kv_in: DenseArray,
    pub params: AttentionParams,
}

fn check_params(p: &AttentionParams, c: usize, heads: usize) -> Result<(), BlockError> {
    if heads == 0 || c % heads != 0 {
        return Err(BlockError::Config(format!(
            "channels {c} not divisible by heads {heads}"
        )));
    }
    for (name, w) in [("wq", &p.wq), ("wk", &p.wk), ("wv", &p.wv), ("wo", &p.wo)] {
        if w.shape() != [c, c] {
            return Err(BlockError::Shape {
                what: format!("attention {name}"),
                expected: vec![c, c],
                actual: w.shape().to_vec(),
            });
        }
    }
    Ok(())
}

pub fn attention_forward(
    q_in: &DenseArray,
    kv_in: &DenseArray,
    p: &AttentionParams,
    heads: usize,
) -> Result<(DenseArray, AttentionCache), BlockError> {
    q_in.expect_rank("attention", 2)?;
    kv_in.expect_rank("attention", 2)?;
    let c = q_in.cols();
    if kv_in.cols() != c {
        return Err(BlockError::Shape {
            what: "attention key/value channels".into(),
            expected: vec![c],
            actual: vec![kv_in.cols()],
        });
    }
    check_params(p, c, heads)?;
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();

    let q = {
        let _s = flops::scope("q_proj");
        ops::matmul(q_in, &p.wq)?
    };
    let k = {
        let _s = flops::scope("k_proj");
        ops::matmul(kv_in, &p.wk)?
    };
    let v = {
        let _s = flops::scope("v_proj");
        ops::matmul(kv_in, &p.wv)?
    };

    let m = q_in.rows();
    let mut concat = DenseArray::zeros(&[m, c]);
    let mut cache_q = Vec::with_capacity(heads);
    let mut cache_k = Vec::with_capacity(heads);
    let mut cache_v = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = ops::column_block(&q, h * d, d)?;
        let kh = ops::column_block(&k, h * d, d)?;
        let vh = ops::column_block(&v, h * d, d)?;
        let scores = {
            let _s = flops::scope("attn_scores");
            ops::matmul(&qh, &ops::transpose(&kh)?)?
        };
        let scaled = {
            let _s = flops::scope("attn_scale");
            ops::scale(&scores, scale)?
        };
        let a = {
            let _s = flops::scope("attn_softmax");
            ops::softmax(&scaled, 1)?
        };
        let oh = {
            let _s = flops::scope("attn_weighted_sum");
            ops::matmul(&a, &vh)?
        };
        ops::set_column_block(&mut concat, h * d, &oh)?;
        cache_q.push(qh);
        cache_k.push(kh);
        cache_v.push(vh);
        probs.push(a);
    }
    let out = {
        let _s = flops::scope("o_proj");
        ops::matmul(&concat, &p.wo)?
    };
    let cache = AttentionCache {
        q_in: q_in.clone(),
        kv_in: kv_in.clone(),
        heads,
        scale,
        q: cache_q,
        k: cache_k,
        v: cache_v,
        probs,
        concat,
    };
    Ok((out, cache))
}

pub fn attention_backward(
    cache: &AttentionCache,
    p: &AttentionParams,
    d_out: &DenseArray,
) -> Result<AttentionGrads, BlockError> {
    let c = cache.q_in.cols();
    let d = c / cache.heads;
    let (m, pk) = (cache.q_in.rows(), cache.kv_in.rows());

    let d_wo = ops::matmul(&ops::transpose(&cache.concat)?, d_out)?;
    let d_concat = ops::matmul(d_out, &ops::transpose(&p.wo)?)?;

    let mut dq = DenseArray::zeros(&[m, c]);
    let mut dk = DenseArray::zeros(&[pk, c]);
    let mut dv = DenseArray::zeros(&[pk, c]);
    for h in 0..cache.heads {
        let a = &cache.probs[h];
        let d_oh = ops::column_block(&d_concat, h * d, d)?;
        let d_a = ops::matmul(&d_oh, &ops::transpose(&cache.v[h])?)?;
        let d_vh = ops::matmul(&ops::transpose(a)?, &d_oh)?;
        let d_scores = ops::scale(&ops::softmax_backward(a, &d_a, 1)?, cache.scale)?;
        let d_qh = ops::matmul(&d_scores, &cache.k[h])?;
        let d_kh = ops::matmul(&ops::transpose(&d_scores)?, &cache.q[h])?;
        ops::set_column_block(&mut dq, h * d, &d_qh)?;
        ops::set_column_block(&mut dk, h * d, &d_kh)?;
        ops::set_column_block(&mut dv, h * d, &d_vh)?;
    }

    let q_in_t = ops::transpose(&cache.q_in)?;
    let kv_in_t = ops::transpose(&cache.kv_in)?;
    let params = AttentionParams {
        wq: ops::matmul(&q_in_t, &dq)?,
        wk: ops::matmul(&kv_in_t, &dk)?,
        wv: ops::matmul(&kv_in_t, &dv)?,
        wo: d_wo,
    };
    let d_q_in = ops::matmul(&dq, &ops::transpose(&p.wq)?)?;
    let mut d_kv_in = ops::matmul(&dk, &ops::transpose(&p.wk)?)?;
    ops::add_assign(&mut d_kv_in, &ops::matmul(&dv, &ops::transpose(&p.wv)?)?)?;
    Ok(AttentionGrads {
        d_q_in,
        d_kv_in,
        params,
    })
}

/// Multi-head self-attention over `x[N×C]`.
pub fn mhsa_forward(
    x: &DenseArray,
    p: &AttentionParams,
    heads: usize,
) -> Result<(DenseArray, AttentionCache), BlockError> {
    attention_forward(x, x, p, heads)
}

/// Returns `(dx, param grads)` for [`mhsa_forward`].
pub fn mhsa_backward(
    cache: &AttentionCache,
    p: &AttentionParams,
    d_out: &DenseArray,
) -> Result<(DenseArray, AttentionParams), BlockError> {
    let g = attention_backward(cache, p, d_out)?;
    let mut dx = g.d_q_in;
    ops::add_assign(&mut dx, &g.d_kv_in)?;
    Ok((dx, g.params))
}
