//! Brute-force reference implementations.
//!
//! Everything here is written as plain loops over nested `Vec`s and calls
//! nothing from `numerics::ops` or the block modules, so agreement with the
//! fast path is evidence rather than tautology.

use crate::blocks::{AttentionParams, CstParams, FfnParams, LayerNormParams, Linear, SgstParams};
use crate::numerics::{DenseArray, LAYERNORM_EPS};

type Mat = Vec<Vec<f64>>;

fn to_mat(a: &DenseArray) -> Mat {
    let cols = a.shape().last().copied().unwrap_or(1).max(1);
    a.data().chunks(cols).map(|r| r.to_vec()).collect()
}

fn from_mat(m: &Mat) -> DenseArray {
    DenseArray::from_rows(m).expect("rectangular")
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let p = b.first().map_or(0, |r| r.len());
    a.iter()
        .map(|row| {
            (0..p)
                .map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum())
                .collect()
        })
        .collect()
}

fn vec_of(a: &DenseArray) -> Vec<f64> {
    a.data().to_vec()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn layer_norm_row(x: &[f64], p: &LayerNormParams) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
    let (g, b) = (p.gamma.data(), p.beta.data());
    x.iter()
        .enumerate()
        .map(|(j, v)| (v - mean) * inv * g[j] + b[j])
        .collect()
}

fn linear_row(x: &[f64], l: &Linear) -> Vec<f64> {
    let w = to_mat(&l.weight);
    let mut out: Vec<f64> = (0..l.out_dim())
        .map(|j| x.iter().zip(&w).map(|(a, wr)| a * wr[j]).sum())
        .collect();
    if let Some(b) = &l.bias {
        out.iter_mut().zip(b.data()).for_each(|(o, b)| *o += b);
    }
    out
}

/// Softmax attention of each query over all keys:
/// `out_i = Σ_j softmax_j(scale · q_i·k_j) v_j`.
pub fn oracle_attention(q: &DenseArray, k: &DenseArray, v: &DenseArray, scale: f64) -> DenseArray {
    let (q, k, v) = (to_mat(q), to_mat(k), to_mat(v));
    let width = v.first().map_or(0, |r| r.len());
    let mut out = Vec::with_capacity(q.len());
    for qi in &q {
        let scores: Vec<f64> = k
            .iter()
            .map(|kj| scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let w = softmax(&scores);
        let mut row = vec![0.0; width];
        for (wj, vj) in w.iter().zip(&v) {
            for (r, x) in row.iter_mut().zip(vj) {
                *r += wj * x;
            }
        }
        out.push(row);
    }
    from_mat(&out)
}

fn columns(m: &Mat, start: usize, width: usize) -> Mat {
    m.iter().map(|r| r[start..start + width].to_vec()).collect()
}

/// Multi-head attention of `queries` over `context` with bias-free
/// projections; heads split the channels into equal contiguous groups.
pub fn oracle_cross_attention(
    queries: &DenseArray,
    context: &DenseArray,
    p: &AttentionParams,
    heads: usize,
) -> DenseArray {
    let (xq, xc) = (to_mat(queries), to_mat(context));
    let q = matmul(&xq, &to_mat(&p.wq));
    let k = matmul(&xc, &to_mat(&p.wk));
    let v = matmul(&xc, &to_mat(&p.wv));
    let c = p.wq.cols();
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut cat = vec![vec![0.0; c]; xq.len()];
    for h in 0..heads {
        let o = to_mat(&oracle_attention(
            &from_mat(&columns(&q, h * d, d)),
            &from_mat(&columns(&k, h * d, d)),
            &from_mat(&columns(&v, h * d, d)),
            scale,
        ));
        for (dst, src) in cat.iter_mut().zip(&o) {
            dst[h * d..(h + 1) * d].copy_from_slice(src);
        }
    }
    from_mat(&matmul(&cat, &to_mat(&p.wo)))
}

pub fn oracle_mhsa(x: &DenseArray, p: &AttentionParams, heads: usize) -> DenseArray {
    oracle_cross_attention(x, x, p, heads)
}

fn ffn_sublayer(x: &Mat, norm: &LayerNormParams, p: &FfnParams) -> Mat {
    let l1 = Linear {
        weight: p.w1.clone(),
        bias: Some(p.b1.clone()),
    };
    let l2 = Linear {
        weight: p.w2.clone(),
        bias: Some(p.b2.clone()),
    };
    x.iter()
        .map(|row| {
            let hidden: Vec<f64> = linear_row(&layer_norm_row(row, norm), &l1)
                .into_iter()
                .map(|v| v.max(0.0))
                .collect();
            let f = linear_row(&hidden, &l2);
            row.iter().zip(&f).map(|(a, b)| a + b).collect()
        })
        .collect()
}

/// One SGST branch: `x1 = residual + CrossAttn(queries, merged)`, then the
/// pre-norm FFN sub-layer with its own residual.
pub fn oracle_branch_attend(
    residual: &DenseArray,
    queries: &DenseArray,
    merged: &DenseArray,
    p: &SgstParams,
) -> DenseArray {
    let a = to_mat(&oracle_cross_attention(queries, merged, &p.attn, p.heads));
    let x1: Mat = to_mat(residual)
        .iter()
        .zip(&a)
        .map(|(r, a)| r.iter().zip(a).map(|(x, y)| x + y).collect())
        .collect();
    from_mat(&ffn_sublayer(&x1, &p.norm2, &p.ffn))
}

/// The vanilla pre-norm Transformer block.
pub fn oracle_vanilla_block(
    x: &DenseArray,
    norm1: &LayerNormParams,
    attn: &AttentionParams,
    norm2: &LayerNormParams,
    ffn: &FfnParams,
    heads: usize,
) -> DenseArray {
    let xm = to_mat(x);
    let y: Mat = xm.iter().map(|r| layer_norm_row(r, norm1)).collect();
    let a = to_mat(&oracle_mhsa(&from_mat(&y), attn, heads));
    let x1: Mat = xm
        .iter()
        .zip(&a)
        .map(|(r, a)| r.iter().zip(a).map(|(x, y)| x + y).collect())
        .collect();
    from_mat(&ffn_sublayer(&x1, norm2, ffn))
}

/// The context path of CST written as ordinary attention: an `N × N` map
/// whose every row is the spatial distribution `G`, values equal to the
/// tokens, then the channel transform applied to each attended token.
///
/// Returns `(x + transform(A·x), A)`.
pub fn oracle_cst_as_attention(x: &DenseArray, p: &CstParams) -> (DenseArray, DenseArray) {
    let xm = to_mat(x);
    let wg = vec_of(&p.w_g);
    let logits: Vec<f64> = xm
        .iter()
        .map(|r| r.iter().zip(&wg).map(|(a, b)| a * b).sum())
        .collect();
    let g = softmax(&logits);
    let a: Mat = vec![g; xm.len()];
    let attended = matmul(&a, &xm);
    let out: Mat = xm
        .iter()
        .zip(&attended)
        .map(|(xi, ci)| {
            let t1: Vec<f64> = layer_norm_row(&linear_row(ci, &p.t1), &p.ctx_norm)
                .into_iter()
                .map(|v| v.max(0.0))
                .collect();
            let delta = linear_row(&t1, &p.t2);
            xi.iter().zip(&delta).map(|(a, b)| a + b).collect()
        })
        .collect();
    (from_mat(&out), from_mat(&a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn single_key_returns_value() {
        let mut rng = Rng::new(3);
        let q = DenseArray::uniform(&[1, 4], -1.0, 1.0, &mut rng);
        let k = DenseArray::uniform(&[1, 4], -1.0, 1.0, &mut rng);
        let v = DenseArray::uniform(&[1, 4], -1.0, 1.0, &mut rng);
        assert!(oracle_attention(&q, &k, &v, 0.7).bit_eq(&v));
    }

    #[test]
    fn sharp_orthonormal_scores_select_matching_value() {
        let q = DenseArray::identity(3);
        let mut rng = Rng::new(4);
        let v = DenseArray::uniform(&[3, 5], -1.0, 1.0, &mut rng);
        let out = oracle_attention(&q, &q, &v, 200.0);
        assert!(out.max_abs_diff(&v).unwrap() < 1e-12);
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let mut rng = Rng::new(5);
        let q = DenseArray::uniform(&[4, 3], -1.0, 1.0, &mut rng);
        let k = DenseArray::uniform(&[6, 3], -1.0, 1.0, &mut rng);
        let ones = DenseArray::filled(&[6, 2], 1.0);
        let out = oracle_attention(&q, &k, &ones, 1.0);
        assert!(out.data().iter().all(|v| (v - 1.0).abs() < 1e-14));
    }
}
