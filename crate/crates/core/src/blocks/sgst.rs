//! Gathering-scattering block.
//!
//! A sigmoid heatmap `h = σ(y·w_h)` over the normalized tokens `y` splits
//! positions into foreground (`h ≥ 0.5`) and background. Each branch
//! weights the tokens by `h` or `1 − h`, soft-merges them from `N` to `K`
//! tokens with the learnable `N × K` matrix `W_m`, and lets its own queries
//! attend to the merged tokens. Updated rows are scattered back to their
//! original positions.
//!
//! Routing is a hard threshold, so the backward pass holds the partition
//! fixed and differentiates through everything else, including the
//! `h`-weighting of the merged tokens.

use crate::numerics::{flops, init_uniform, ops, DenseArray, Rng};

use super::attention::{attention_backward, attention_forward, AttentionCache};
use super::ffn::{ffn_backward, ffn_forward, FfnCache};
use super::params::{param_struct, AttentionParams, FfnParams, LayerNormParams, ParamSet};
use super::{BlockConfig, BlockError, MergeNorm};

#[derive(Debug, Clone, PartialEq)]
pub struct SgstParams {
    pub norm1: LayerNormParams,
    /// Heatmap head, `C × 1`.
    pub w_h: DenseArray,
    /// Merge matrix, `N × K`.
    pub w_m: DenseArray,
    /// Shared by both branches.
    pub attn: AttentionParams,
    pub norm2: LayerNormParams,
    pub ffn: FfnParams,
    pub heads: usize,
}
param_struct!(SgstParams { norm1, w_h, w_m, attn, norm2, ffn });

impl SgstParams {
    pub fn init(cfg: &BlockConfig, rng: &mut Rng) -> Self {
        let c = cfg.channels;
        let n = cfg.tokens;
        Self {
            norm1: LayerNormParams::new(c),
            w_h: init_uniform(&[c, 1], c, rng),
            w_m: init_uniform(&[n, cfg.merged_tokens()], n, rng),
            attn: AttentionParams::init(c, rng),
            norm2: LayerNormParams::new(c),
            ffn: FfnParams::init(c, cfg.ffn_hidden(), rng),
            heads: cfg.heads,
        }
    }

    pub fn merged_tokens(&self) -> usize {
        self.w_m.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Fg,
    Bg,
}

/// Foreground/background partition of token positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatherPlan {
    fg: Vec<usize>,
    bg: Vec<usize>,
    is_fg: Vec<bool>,
}

impl GatherPlan {
    pub const THRESHOLD: f64 = 0.5;

    /// Ties at the threshold go to the foreground.
    pub fn from_heatmap(h: &[f64]) -> Self {
        let is_fg: Vec<bool> = h.iter().map(|&v| v >= Self::THRESHOLD).collect();
        Self::from_mask(is_fg)
    }

    pub fn from_mask(is_fg: Vec<bool>) -> Self {
        let (mut fg, mut bg) = (Vec::new(), Vec::new());
        for (i, &f) in is_fg.iter().enumerate() {
            if f {
                fg.push(i)
            } else {
                bg.push(i)
            }
        }
        Self { fg, bg, is_fg }
    }

    pub fn fg(&self) -> &[usize] {
        &self.fg
    }

    pub fn bg(&self) -> &[usize] {
        &self.bg
    }

    pub fn indexes(&self, branch: Branch) -> &[usize] {
        match branch {
            Branch::Fg => &self.fg,
            Branch::Bg => &self.bg,
        }
    }

    pub fn len(&self) -> usize {
        self.is_fg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.is_fg.is_empty()
    }

    pub fn is_fg(&self, i: usize) -> bool {
        self.is_fg[i]
    }

    pub fn mask(&self) -> &[bool] {
        &self.is_fg
    }
}

/// Output of [`sgst_gather`].
#[derive(Debug, Clone)]
pub struct Gathered {
    pub heatmap: Vec<f64>,
    pub plan: GatherPlan,
    pub q_f: DenseArray,
    pub q_b: DenseArray,
}

pub(crate) fn heatmap(y: &DenseArray, w_h: &DenseArray) -> Result<Vec<f64>, BlockError> {
    let logits = {
        let _s = flops::scope("heatmap_head");
        ops::matmul(y, w_h)?
    };
    let _s = flops::scope("heatmap_sigmoid");
    Ok(ops::sigmoid(&logits)?.into_data())
}

/// Heatmap, partition and the gathered query rows of each branch.
pub fn sgst_gather(x: &DenseArray, p: &SgstParams) -> Result<Gathered, BlockError> {
    x.expect_rank("sgst_gather", 2)?;
    let h = heatmap(x, &p.w_h)?;
    let plan = GatherPlan::from_heatmap(&h);
    Ok(Gathered {
        q_f: ops::gather_rows(x, plan.fg())?,
        q_b: ops::gather_rows(x, plan.bg())?,
        heatmap: h,
        plan,
    })
}

pub(crate) fn normalize_merge(w_m: &DenseArray, norm: MergeNorm) -> Result<DenseArray, BlockError> {
    Ok(match norm {
        MergeNorm::Softmax => {
            let _s = flops::scope("merge_norm");
            ops::softmax(w_m, 0)?
        }
        MergeNorm::Raw => w_m.clone(),
    })
}

pub(crate) fn branch_coef(h: &[f64], branch: Branch) -> Result<Vec<f64>, BlockError> {
    Ok(match branch {
        Branch::Fg => h.to_vec(),
        Branch::Bg => {
            let _s = flops::scope("heatmap_scale");
            let arr = DenseArray::new(vec![h.len()], h.to_vec())?;
            ops::one_minus(&arr)?.into_data()
        }
    })
}

/// Returns `(merged, weighted tokens)` for normalized `wn`.
pub(crate) fn merge(y: &DenseArray, coef: &[f64], wn: &DenseArray) -> Result<(DenseArray, DenseArray), BlockError> {
    let e = {
        let _s = flops::scope("heatmap_scale");
        ops::scale_rows(y, coef)?
    };
    let merged = {
        let _s = flops::scope("merge");
        ops::matmul(&ops::transpose(wn)?, &e)?
    };
    Ok((merged, e))
}

pub(crate) fn check_merge_rows(x: &DenseArray, w_m: &DenseArray) -> Result<(), BlockError> {
    if w_m.rank() != 2 || w_m.rows() != x.rows() || w_m.cols() == 0 {
        return Err(BlockError::Shape {
            what: "merge matrix".into(),
            expected: vec![x.rows(), w_m.shape().get(1).copied().unwrap_or(1).max(1)],
            actual: w_m.shape().to_vec(),
        });
    }
    Ok(())
}

/// Soft-merges the heatmap-weighted tokens of one branch into `K × C`.
pub fn sgst_soft_merge(
    x: &DenseArray,
    h: &[f64],
    w_m: &DenseArray,
    branch: Branch,
    norm: MergeNorm,
) -> Result<DenseArray, BlockError> {
    x.expect_rank("sgst_soft_merge", 2)?;
    check_merge_rows(x, w_m)?;
    if h.len() != x.rows() {
        return Err(BlockError::RowCount {
            what: "heatmap",
            expected: x.rows(),
            actual: h.len(),
        });
    }
    let wn = normalize_merge(w_m, norm)?;
    let coef = branch_coef(h, branch)?;
    Ok(merge(x, &coef, &wn)?.0)
}

/// Pure cross-attention of `queries` over `merged` keys and values.
pub fn sgst_cross_attend(
    queries: &DenseArray,
    merged: &DenseArray,
    attn: &AttentionParams,
    heads: usize,
) -> Result<DenseArray, BlockError> {
    attention_forward(queries, merged, attn, heads).map(|(y, _)| y)
}

fn branch_attend(
    residual: &DenseArray,
    queries: &DenseArray,
    merged: &DenseArray,
    p: &SgstParams,
) -> Result<(DenseArray, AttentionCache, FfnCache), BlockError> {
    if residual.shape() != queries.shape() {
        return Err(BlockError::Shape {
            what: "branch residual".into(),
            expected: queries.shape().to_vec(),
            actual: residual.shape().to_vec(),
        });
    }
    let (a, attn) = attention_forward(queries, merged, &p.attn, p.heads)?;
    let x1 = {
        let _s = flops::scope("residual1");
        ops::add(residual, &a)?
    };
    let (out, ffn) = ffn_forward(&x1, &p.norm2, &p.ffn)?;
    Ok((out, attn, ffn))
}

/// One branch's Transformer update: `x1 = residual + Attn(queries, merged)`,
/// then the FFN sub-layer. `queries` are the normalized rows of the branch
/// and `residual` the same rows before normalization.
pub fn sgst_branch_attend(
    residual: &DenseArray,
    queries: &DenseArray,
    merged: &DenseArray,
    p: &SgstParams,
) -> Result<DenseArray, BlockError> {
    branch_attend(residual, queries, merged, p).map(|(y, _, _)| y)
}

/// Writes the branch updates back to their positions.
pub fn sgst_scatter(
    x: &DenseArray,
    plan: &GatherPlan,
    upd_f: &DenseArray,
    upd_b: &DenseArray,
) -> Result<DenseArray, BlockError> {
    x.expect_rank("sgst_scatter", 2)?;
    if plan.len() != x.rows() {
        return Err(BlockError::RowCount {
            what: "scatter plan",
            expected: x.rows(),
            actual: plan.len(),
        });
    }
    for (upd, idx, what) in [(upd_f, plan.fg(), "foreground updates"), (upd_b, plan.bg(), "background updates")] {
        let rows = if upd.rank() == 2 { upd.rows() } else { usize::MAX };
        if rows != idx.len() {
            return Err(BlockError::RowCount {
                what,
                expected: idx.len(),
                actual: rows,
            });
        }
    }
    let mut out = x.clone();
    ops::scatter_rows(&mut out, plan.fg(), upd_f)?;
    ops::scatter_rows(&mut out, plan.bg(), upd_b)?;
    Ok(out)
}

#[derive(Debug, Clone)]
struct BranchCache {
    idx: Vec<usize>,
    branch: Branch,
    coef: Vec<f64>,
    e: DenseArray,
    attn: AttentionCache,
    ffn: FfnCache,
}

#[derive(Debug, Clone)]
pub struct SgstCache {
    norm1: ops::LayerNormCache,
    y: DenseArray,
    heatmap: Vec<f64>,
    forced: bool,
    plan: GatherPlan,
    merge_norm: MergeNorm,
    wn: Option<DenseArray>,
    branches: Vec<BranchCache>,
}

impl SgstCache {
    pub fn heatmap(&self) -> &[f64] {
        &self.heatmap
    }

    pub fn plan(&self) -> &GatherPlan {
        &self.plan
    }

    /// Attention matrices of an active branch, one per head.
    pub fn attention(&self, branch: Branch) -> Option<&[DenseArray]> {
        self.branches
            .iter()
            .find(|b| b.branch == branch)
            .map(|b| b.attn.probs())
    }

    pub(crate) fn regime(&self, out: &mut Vec<bool>) {
        out.extend_from_slice(self.plan.mask());
        for b in &self.branches {
            b.ffn.regime(out);
        }
    }
}

/// Branches that run for a given plan.
pub fn active_branches(plan: &GatherPlan, fg_only: bool) -> Vec<Branch> {
    let mut out = Vec::with_capacity(2);
    if !plan.fg().is_empty() {
        out.push(Branch::Fg);
    }
    if !plan.bg().is_empty() && !fg_only {
        out.push(Branch::Bg);
    }
    out
}

/// Full block. `forced_heatmap` replaces the predicted heatmap (the head is
/// then skipped and receives no gradient).
pub(crate) fn sgst_forward(
    x: &DenseArray,
    p: &SgstParams,
    cfg: &BlockConfig,
    forced_heatmap: Option<&[f64]>,
) -> Result<(DenseArray, SgstCache), BlockError> {
    x.expect_rank("sgst_block", 2)?;
    check_merge_rows(x, &p.w_m)?;
    let (y, norm1) = {
        let _s = flops::scope("norm1");
        ops::layernorm_forward(x, &p.norm1.gamma, &p.norm1.beta, 1)?
    };
    let h = match forced_heatmap {
        Some(h) => {
            if h.len() != x.rows() {
                return Err(BlockError::RowCount {
                    what: "forced heatmap",
                    expected: x.rows(),
                    actual: h.len(),
                });
            }
            h.to_vec()
        }
        None => heatmap(&y, &p.w_h)?,
    };
    let plan = GatherPlan::from_heatmap(&h);
    let active = active_branches(&plan, cfg.fg_only);
    let wn = if active.is_empty() {
        None
    } else {
        Some(normalize_merge(&p.w_m, cfg.merge_norm)?)
    };

    let mut out = x.clone();
    let mut branches = Vec::with_capacity(active.len());
    for branch in active {
        let wn = wn.as_ref().expect("merge matrix normalized for active branches");
        let idx = plan.indexes(branch).to_vec();
        let coef = branch_coef(&h, branch)?;
        let (merged, e) = merge(&y, &coef, wn)?;
        let queries = ops::gather_rows(&y, &idx)?;
        let residual = ops::gather_rows(x, &idx)?;
        let (upd, attn, ffn) = branch_attend(&residual, &queries, &merged, p)?;
        ops::scatter_rows(&mut out, &idx, &upd)?;
        branches.push(BranchCache {
            idx,
            branch,
            coef,
            e,
            attn,
            ffn,
        });
    }
    let cache = SgstCache {
        norm1,
        y,
        heatmap: h,
        forced: forced_heatmap.is_some(),
        plan,
        merge_norm: cfg.merge_norm,
        wn,
        branches,
    };
    Ok((out, cache))
}

pub fn sgst_block_forward(
    x: &DenseArray,
    p: &SgstParams,
    cfg: &BlockConfig,
) -> Result<DenseArray, BlockError> {
    sgst_forward(x, p, cfg, None).map(|(y, _)| y)
}

/// [`sgst_block_forward`] with a fixed heatmap in place of the predicted one.
pub fn sgst_block_forward_with_heatmap(
    x: &DenseArray,
    p: &SgstParams,
    cfg: &BlockConfig,
    heatmap: &[f64],
) -> Result<(DenseArray, SgstCache), BlockError> {
    sgst_forward(x, p, cfg, Some(heatmap))
}

pub(crate) fn sgst_backward(
    cache: &SgstCache,
    p: &SgstParams,
    d_out: &DenseArray,
) -> Result<(DenseArray, SgstParams), BlockError> {
    let mut grads = p.zeros_like();
    let y = &cache.y;
    let n = y.rows();
    let mut dx = d_out.clone();
    let mut dy = DenseArray::zeros(y.shape());
    let mut dh = vec![0.0; n];
    let mut d_wn = DenseArray::zeros(p.w_m.shape());

    for b in &cache.branches {
        let wn = cache.wn.as_ref().expect("active branch implies merge matrix");
        let d_upd = ops::gather_rows(d_out, &b.idx)?;
        let (d_x1, d_norm2, d_ffn) = ffn_backward(&b.ffn, &p.norm2, &p.ffn, &d_upd)?;
        grads.norm2.accumulate(&d_norm2);
        grads.ffn.accumulate(&d_ffn);
        let g = attention_backward(&b.attn, &p.attn, &d_x1)?;
        grads.attn.accumulate(&g.params);
        ops::scatter_rows(&mut dx, &b.idx, &d_x1)?;
        for (j, &i) in b.idx.iter().enumerate() {
            for (d, s) in dy.row_mut(i).iter_mut().zip(g.d_q_in.row(j)) {
                *d += s;
            }
        }
        let d_merged = &g.d_kv_in;
        ops::add_assign(&mut d_wn, &ops::matmul(&b.e, &ops::transpose(d_merged)?)?)?;
        let d_e = ops::matmul(wn, d_merged)?;
        ops::add_assign(&mut dy, &ops::scale_rows(&d_e, &b.coef)?)?;
        let d_coef = ops::row_dots(&d_e, y)?;
        let sign = match b.branch {
            Branch::Fg => 1.0,
            Branch::Bg => -1.0,
        };
        for (acc, v) in dh.iter_mut().zip(&d_coef) {
            *acc += sign * v;
        }
    }

    if !cache.forced {
        let d_logits: Vec<f64> = dh
            .iter()
            .zip(&cache.heatmap)
            .map(|(d, h)| d * h * (1.0 - h))
            .collect();
        let d_logits = DenseArray::new(vec![n, 1], d_logits)?;
        grads.w_h = ops::matmul(&ops::transpose(y)?, &d_logits)?;
        ops::add_assign(&mut dy, &ops::matmul(&d_logits, &ops::transpose(&p.w_h)?)?)?;
    }
    if let Some(wn) = &cache.wn {
        grads.w_m = match cache.merge_norm {
            MergeNorm::Softmax => ops::softmax_backward(wn, &d_wn, 0)?,
            MergeNorm::Raw => d_wn,
        };
    }
    let (d_from_norm, dg, db) = ops::layernorm_backward(&cache.norm1, &p.norm1.gamma, &dy)?;
    grads.norm1 = LayerNormParams { gamma: dg, beta: db };
    ops::add_assign(&mut dx, &d_from_norm)?;
    Ok((dx, grads))
}
