//! Analytic FLOP and memory model.
//!
//! Every report itemizes the same labels the instrumented forward passes
//! record (see [`crate::numerics::flops`] for the per-primitive convention),
//! so an analytic report and a measured tally can be compared item by item.
//! Items with zero FLOPs are omitted on both sides.
//!
//! The token-mixing portion of a block is every item except the two norms,
//! the two residual adds and the FFN; [`CostReport::mixer_total`] sums it.

mod sweep;

pub use sweep::{cost_sweep, write_csv, SweepConfig, SweepRow, CSV_HEADER};

use std::collections::BTreeMap;

use serde::Serialize;

use crate::blocks::{block_forward, BlockConfig, BlockError, BlockKind, BlockParams, MergeNorm};
use crate::numerics::flops::{
    self, FlopTally, LAYERNORM_PER_ELEM, LAYERNORM_PER_SLICE, RELU_PER_ELEM, SIGMOID_PER_ELEM,
    SOFTMAX_PER_ELEM,
};
use crate::numerics::DenseArray;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    AttentionCore,
    Projection,
    Merge,
    Ffn,
    NormActivation,
    Elementwise,
}

/// Category of an item label.
pub fn category(item: &str) -> Category {
    match item {
        "attn_scores" | "attn_weighted_sum" | "context_pool" => Category::AttentionCore,
        "q_proj" | "k_proj" | "v_proj" | "o_proj" | "spatial_head" | "heatmap_head" | "ctx_t1"
        | "ctx_t2" | "mix_proj" => Category::Projection,
        "merge" | "merge_norm" | "heatmap_scale" => Category::Merge,
        s if s.starts_with("ffn_") => Category::Ffn,
        "norm1" | "norm2" | "ctx_norm" | "attn_softmax" | "attn_scale" | "spatial_softmax"
        | "heatmap_sigmoid" | "ctx_relu" => Category::NormActivation,
        _ => Category::Elementwise,
    }
}

/// Items outside the token-mixing portion.
pub fn is_block_overhead(item: &str) -> bool {
    matches!(item, "norm1" | "norm2" | "residual1" | "residual2") || item.starts_with("ffn_")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub block: String,
    pub n: usize,
    pub c: usize,
    pub heads: usize,
    /// Merged-token count for the gathering block, 0 otherwise.
    pub k: usize,
    pub items: BTreeMap<String, u64>,
    /// Largest element count of any intermediate produced.
    pub peak_elements: u64,
}

impl CostReport {
    fn new(block: &str, n: usize, c: usize, heads: usize, k: usize) -> Self {
        Self {
            block: block.to_string(),
            n,
            c,
            heads,
            k,
            items: BTreeMap::new(),
            peak_elements: 0,
        }
    }

    fn add(&mut self, item: &str, flops: u64, out_elements: u64) {
        if flops > 0 {
            *self.items.entry(item.to_string()).or_insert(0) += flops;
        }
        self.peak_elements = self.peak_elements.max(out_elements);
    }

    fn merge_from(&mut self, other: &CostReport) {
        for (k, v) in &other.items {
            *self.items.entry(k.clone()).or_insert(0) += v;
        }
        self.peak_elements = self.peak_elements.max(other.peak_elements);
    }

    pub fn total(&self) -> u64 {
        self.items.values().sum()
    }

    pub fn item(&self, name: &str) -> u64 {
        self.items.get(name).copied().unwrap_or(0)
    }

    /// Sum over the token-mixing items.
    pub fn mixer_total(&self) -> u64 {
        self.items
            .iter()
            .filter(|(k, _)| !is_block_overhead(k))
            .map(|(_, v)| v)
            .sum()
    }

    pub fn attention_core(&self) -> u64 {
        self.category_total(Category::AttentionCore)
    }

    pub fn category_total(&self, cat: Category) -> u64 {
        self.items
            .iter()
            .filter(|(k, _)| category(k) == cat)
            .map(|(_, v)| v)
            .sum()
    }

    pub fn totals(&self) -> BTreeMap<Category, u64> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.items {
            *out.entry(category(k)).or_insert(0) += v;
        }
        out
    }

    /// Items that differ from a measured tally, as `(item, analytic, measured)`.
    pub fn diff(&self, tally: &FlopTally) -> Vec<(String, u64, u64)> {
        let mut keys: Vec<&String> = self.items.keys().chain(tally.items.keys()).collect();
        keys.sort();
        keys.dedup();
        keys.into_iter()
            .filter_map(|k| {
                let a = self.item(k);
                let m = tally.items.get(k).copied().unwrap_or(0);
                (a != m).then(|| (k.clone(), a, m))
            })
            .collect()
    }
}

fn u(v: usize) -> u64 {
    v as u64
}

fn layernorm(r: &mut CostReport, item: &str, rows: usize, len: usize) {
    r.add(
        item,
        LAYERNORM_PER_ELEM * u(rows * len) + LAYERNORM_PER_SLICE * u(rows),
        u(rows * len),
    );
}

/// `M` queries over `P` keys/values with bias-free projections.
fn attention(r: &mut CostReport, m: usize, p: usize, c: usize, heads: usize) {
    let d = c / heads;
    r.add("q_proj", 2 * u(m * c * c), u(m * c));
    r.add("k_proj", 2 * u(p * c * c), u(p * c));
    r.add("v_proj", 2 * u(p * c * c), u(p * c));
    for _ in 0..heads {
        r.add("attn_scores", 2 * u(m * d * p), u(m * p));
        r.add("attn_scale", u(m * p), u(m * p));
        r.add("attn_softmax", SOFTMAX_PER_ELEM * u(m * p), u(m * p));
        r.add("attn_weighted_sum", 2 * u(m * p * d), u(m * d));
    }
    r.add("o_proj", 2 * u(m * c * c), u(m * c));
}

fn ffn_sublayer(r: &mut CostReport, rows: usize, c: usize, ffn_ratio: usize) {
    let hidden = c * ffn_ratio;
    layernorm(r, "norm2", rows, c);
    r.add("ffn_w1", 2 * u(rows * c * hidden), u(rows * hidden));
    r.add("ffn_b1", u(rows * hidden), u(rows * hidden));
    r.add("ffn_relu", RELU_PER_ELEM * u(rows * hidden), u(rows * hidden));
    r.add("ffn_w2", 2 * u(rows * hidden * c), u(rows * c));
    r.add("ffn_b2", u(rows * c), u(rows * c));
    r.add("residual2", u(rows * c), u(rows * c));
}

/// Multi-head self-attention sub-layer alone.
pub fn flops_mhsa(n: usize, c: usize, heads: usize) -> CostReport {
    let mut r = CostReport::new("vanilla", n, c, heads, 0);
    attention(&mut r, n, n, c, heads);
    r
}

/// Shared-context path plus its broadcast add.
pub fn flops_cst(n: usize, c: usize, ctx_reduction: usize) -> CostReport {
    let h = c / ctx_reduction;
    let mut r = CostReport::new("cst", n, c, 1, 0);
    r.add("spatial_head", 2 * u(n * c), u(n));
    r.add("spatial_softmax", SOFTMAX_PER_ELEM * u(n), u(n));
    r.add("context_pool", 2 * u(n * c), u(c));
    r.add("ctx_t1", 2 * u(c * h), u(h));
    r.add("ctx_t1_bias", u(h), u(h));
    r.add("ctx_norm", LAYERNORM_PER_ELEM * u(h) + LAYERNORM_PER_SLICE, u(h));
    r.add("ctx_relu", RELU_PER_ELEM * u(h), u(h));
    r.add("ctx_t2", 2 * u(h * c), u(c));
    r.add("ctx_t2_bias", u(c), u(c));
    r.add("broadcast_add", u(n * c), u(n * c));
    r
}

/// Options of the gathering block that change its cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SgstCostOptions {
    pub merge_norm: MergeNorm,
    pub fg_only: bool,
}

impl Default for SgstCostOptions {
    fn default() -> Self {
        Self {
            merge_norm: MergeNorm::Softmax,
            fg_only: false,
        }
    }
}

/// Branches `(rows, is_background)` that run for `n_f` foreground tokens.
fn sgst_branches(n: usize, n_f: usize, fg_only: bool) -> Vec<(usize, bool)> {
    let mut out = Vec::new();
    if n_f > 0 {
        out.push((n_f, false));
    }
    if n > n_f && !fg_only {
        out.push((n - n_f, true));
    }
    out
}

fn sgst_mixer(r: &mut CostReport, n: usize, c: usize, heads: usize, k: usize, n_f: usize, opt: SgstCostOptions, with_ffn: usize) {
    r.add("heatmap_head", 2 * u(n * c), u(n));
    r.add("heatmap_sigmoid", SIGMOID_PER_ELEM * u(n), u(n));
    let branches = sgst_branches(n, n_f, opt.fg_only);
    if !branches.is_empty() && opt.merge_norm == MergeNorm::Softmax {
        r.add("merge_norm", SOFTMAX_PER_ELEM * u(n * k), u(n * k));
    }
    for (rows, bg) in branches {
        if bg {
            r.add("heatmap_scale", u(n), u(n));
        }
        r.add("heatmap_scale", u(n * c), u(n * c));
        r.add("merge", 2 * u(k * n * c), u(k * c));
        attention(r, rows, k, c, heads);
        if with_ffn > 0 {
            r.add("residual1", u(rows * c), u(rows * c));
            ffn_sublayer(r, rows, c, with_ffn);
        }
    }
}

/// Gathering-scattering token mixer: heatmap, both merges, both branches'
/// attention. `n_f` is the foreground token count.
pub fn flops_sgst(n: usize, c: usize, heads: usize, k: usize, n_f: usize) -> CostReport {
    flops_sgst_with(n, c, heads, k, n_f, SgstCostOptions::default())
}

pub fn flops_sgst_with(
    n: usize,
    c: usize,
    heads: usize,
    k: usize,
    n_f: usize,
    opt: SgstCostOptions,
) -> CostReport {
    let mut r = CostReport::new("sgst", n, c, heads, k);
    sgst_mixer(&mut r, n, c, heads, k, n_f.min(n), opt, 0);
    r
}

/// Whole block including norms, residuals and FFN. For the gathering block
/// `n_f` is the foreground count of the plan that the forward pass used.
pub fn flops_block(kind: BlockKind, cfg: &BlockConfig, n_f: usize) -> CostReport {
    let (n, c) = (cfg.tokens, cfg.channels);
    match kind {
        BlockKind::Vanilla => {
            let mut r = CostReport::new("vanilla", n, c, cfg.heads, 0);
            layernorm(&mut r, "norm1", n, c);
            r.merge_from(&flops_mhsa(n, c, cfg.heads));
            r.add("residual1", u(n * c), u(n * c));
            ffn_sublayer(&mut r, n, c, cfg.ffn_ratio);
            r
        }
        BlockKind::Cst => {
            let mut r = CostReport::new("cst", n, c, 1, 0);
            layernorm(&mut r, "norm1", n, c);
            r.merge_from(&flops_cst(n, c, cfg.ctx_reduction));
            ffn_sublayer(&mut r, n, c, cfg.ffn_ratio);
            r
        }
        BlockKind::Sgst => {
            let k = cfg.merged_tokens();
            let mut r = CostReport::new("sgst", n, c, cfg.heads, k);
            layernorm(&mut r, "norm1", n, c);
            let opt = SgstCostOptions {
                merge_norm: cfg.merge_norm,
                fg_only: cfg.fg_only,
            };
            sgst_mixer(&mut r, n, c, cfg.heads, k, n_f.min(n), opt, cfg.ffn_ratio);
            r
        }
    }
}

/// Appearance/motion mixing projection.
pub fn flops_mix(n: usize, c: usize) -> CostReport {
    let mut r = CostReport::new("mix", n, c, 1, 0);
    r.add("mix_proj", 2 * u(n * 2 * c * c), u(n * c));
    r.add("mix_bias", u(n * c), u(n * c));
    r
}

/// A measured forward pass: the instrumented tally and the foreground count.
#[derive(Debug, Clone)]
pub struct Measured {
    pub tally: FlopTally,
    pub n_f: usize,
    pub output: DenseArray,
}

/// Runs one block forward with counting enabled.
pub fn measure_block(
    x: &DenseArray,
    params: &BlockParams,
    cfg: &BlockConfig,
) -> Result<Measured, BlockError> {
    let (res, tally) = flops::record(|| block_forward(x, params, cfg));
    let (output, cache) = res?;
    let n_f = match &cache {
        crate::blocks::BlockCache::Sgst(c) => c.plan().fg().len(),
        _ => 0,
    };
    Ok(Measured { tally, n_f, output })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::MergeRatio;
    use crate::numerics::Rng;

    #[test]
    fn mhsa_closed_form_example() {
        let r = flops_mhsa(256, 64, 1);
        let proj: u64 = ["q_proj", "k_proj", "v_proj", "o_proj"].iter().map(|i| r.item(i)).sum();
        assert_eq!(proj, 8 * 256 * 64 * 64);
        assert_eq!(proj, 8_388_608);
        assert_eq!(r.attention_core(), 16_777_216);
        assert_eq!(flops_mhsa(1, 64, 1).attention_core(), 4 * 64);
        assert_eq!(flops_mhsa(512, 64, 1).attention_core(), 4 * r.attention_core());
    }

    #[test]
    fn cst_is_linear_in_tokens() {
        let a = flops_cst(1024, 256, 4);
        let b = flops_cst(2048, 256, 4);
        for item in ["spatial_head", "spatial_softmax", "context_pool", "broadcast_add"] {
            assert_eq!(b.item(item), 2 * a.item(item));
        }
        assert!((a.total() as f64) < 0.01 * flops_mhsa(1024, 256, 1).total() as f64);
        let r1 = flops_cst(1024, 256, 1);
        let changed: Vec<_> = a.items.keys().filter(|k| a.item(k) != r1.item(k)).collect();
        assert!(changed.iter().all(|k| k.starts_with("ctx_")));
    }

    #[test]
    fn sgst_core_matches_vanilla_at_full_ratio() {
        let n = 64;
        let s = flops_sgst(n, 32, 1, n, 20);
        assert_eq!(s.attention_core(), flops_mhsa(n, 32, 1).attention_core());
        assert_eq!(s.attention_core(), flops_sgst(n, 32, 1, n, 50).attention_core());
        assert_eq!(s.item("merge"), 2 * 2 * (n * n * 32) as u64);
    }

    #[test]
    fn analytic_equals_instrumented() {
        let mut rng = Rng::new(42);
        for kind in BlockKind::ALL {
            for (n, c, heads) in [(5, 8, 1), (9, 8, 2), (12, 4, 4)] {
                let mut cfg = BlockConfig::new(c, n);
                cfg.heads = heads;
                cfg.ctx_reduction = 2;
                cfg.merge_ratio = MergeRatio::new(1, 3).unwrap();
                let p = BlockParams::init(kind, &cfg, &mut rng).unwrap();
                let x = DenseArray::uniform(&[n, c], -1.0, 1.0, &mut rng);
                let m = measure_block(&x, &p, &cfg).unwrap();
                let a = flops_block(kind, &cfg, m.n_f);
                assert!(a.diff(&m.tally).is_empty(), "{kind}: {:?}", a.diff(&m.tally));
                assert_eq!(a.peak_elements, m.tally.peak_elements, "{kind}");
            }
        }
    }
}
