//! Wall-time benchmarks of single block forwards.
//!
//! Each timed forward is split into two stages measured in the same pass:
//! the attention stage (first norm, token mixer and first residual) and the
//! whole block. Reported statistics are the median and interquartile range
//! over `repeats` runs after `warmups` untimed runs.
//!
//! Rows share the `(block, N, C, heads, K)` key columns of the cost tables,
//! with `K = 0` for blocks that do not merge tokens.

use std::fmt;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::blocks::cst::context_delta;
use crate::blocks::ffn::ffn_forward;
use crate::blocks::sgst::{active_branches, branch_coef, check_merge_rows, heatmap, merge, normalize_merge};
use crate::blocks::{
    attention::attention_forward, mhsa_forward, BlockConfig, BlockError, BlockKind, BlockParams, GatherPlan,
    MergeNorm, MergeRatio,
};
use crate::cost::flops_block;
use crate::numerics::{ops, DenseArray, Rng};

pub const CSV_HEADER: [&str; 10] = ["block", "N", "C", "heads", "K", "stage", "repeats", "median_s", "iqr_s", "flops"];

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(
        "refusing {block} at N={n}, C={c}: estimated working set {needed} bytes exceeds the memory cap of {cap} bytes"
    )]
    MemoryCap {
        block: BlockKind,
        n: usize,
        c: usize,
        needed: u64,
        cap: u64,
    },
    #[error("invalid bench config: {0}")]
    Config(String),
    #[error(transparent)]
    Block(#[from] BlockError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub blocks: Vec<BlockKind>,
    pub tokens: Vec<usize>,
    pub channels: Vec<usize>,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub ctx_reduction: usize,
    pub merge_ratio: MergeRatio,
    pub merge_norm: MergeNorm,
    pub repeats: usize,
    pub warmups: usize,
    pub memory_cap_bytes: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            blocks: BlockKind::ALL.to_vec(),
            tokens: vec![1024, 4096],
            channels: vec![256],
            heads: 1,
            ffn_ratio: 4,
            ctx_reduction: 4,
            merge_ratio: MergeRatio::ONE_NINTH,
            merge_norm: MergeNorm::Softmax,
            repeats: 11,
            warmups: 3,
            memory_cap_bytes: 4 << 30,
        }
    }
}

impl BenchConfig {
    pub fn block_config(&self, n: usize, c: usize) -> BlockConfig {
        BlockConfig {
            heads: self.heads,
            ffn_ratio: self.ffn_ratio,
            ctx_reduction: self.ctx_reduction,
            merge_ratio: self.merge_ratio,
            merge_norm: self.merge_norm,
            ..BlockConfig::new(c, n)
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.repeats == 0 {
            return Err(BenchError::Config("repeats must be at least 1".into()));
        }
        if self.blocks.is_empty() || self.tokens.is_empty() || self.channels.is_empty() {
            return Err(BenchError::Config("blocks, tokens and channels must be non-empty".into()));
        }
        for &n in &self.tokens {
            for &c in &self.channels {
                self.block_config(n, c).validate()?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// First norm, token mixer and first residual.
    Attention,
    Block,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Attention => "attention",
            Stage::Block => "block",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub block: BlockKind,
    pub n: usize,
    pub c: usize,
    pub heads: usize,
    pub k: usize,
    pub stage: Stage,
    pub repeats: usize,
    pub median_s: f64,
    pub iqr_s: f64,
    /// Analytic FLOPs of the timed stage.
    pub flops: u64,
}

/// Linear-interpolation quantile of sorted samples.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// `(median, q3 − q1)`. A single sample has zero spread.
pub fn median_iqr(samples: &[f64]) -> (f64, f64) {
    assert!(!samples.is_empty(), "no samples");
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    if s.len() == 1 {
        return (s[0], 0.0);
    }
    (quantile(&s, 0.5), quantile(&s, 0.75) - quantile(&s, 0.25))
}

/// Rough peak working set of one forward, in bytes.
pub fn working_set_bytes(kind: BlockKind, cfg: &BlockConfig) -> u64 {
    let (n, c) = (cfg.tokens as u64, cfg.channels as u64);
    let heads = cfg.heads as u64;
    let k = cfg.merged_tokens() as u64;
    let attention = match kind {
        // cached probabilities per head plus the live score matrix
        BlockKind::Vanilla => (heads + 1) * n * n,
        BlockKind::Cst => 2 * n,
        BlockKind::Sgst => (heads + 1) * n * k + 2 * n * k,
    };
    let activations = 16 * n * c + 2 * n * c * cfg.ffn_ratio as u64;
    8 * (attention + activations)
}

/// One forward with its timings and the routing it took.
#[derive(Debug, Clone)]
pub struct Timed {
    pub output: DenseArray,
    pub attention_s: f64,
    pub block_s: f64,
    /// Foreground count of the gathering block, 0 otherwise.
    pub n_f: usize,
}

/// Runs a block forward, timing the attention stage and the whole block.
/// The output is bitwise equal to [`crate::blocks::block_forward`].
pub fn timed_forward(x: &DenseArray, params: &BlockParams, cfg: &BlockConfig) -> Result<Timed, BlockError> {
    x.expect_rank("bench", 2)?;
    let start = Instant::now();
    let (x1, mid, n_f, out) = match params {
        BlockParams::Vanilla(p) => {
            let y = ops::layernorm_forward(x, &p.norm1.gamma, &p.norm1.beta, 1)?.0;
            let a = mhsa_forward(&y, &p.attn, p.heads)?.0;
            let x1 = ops::add(x, &a)?;
            let mid = start.elapsed();
            let out = ffn_forward(&x1, &p.norm2, &p.ffn)?.0;
            (x1, mid, 0, out)
        }
        BlockParams::Cst(p) => {
            let y = ops::layernorm_forward(x, &p.norm1.gamma, &p.norm1.beta, 1)?.0;
            let delta = context_delta(&y, p)?.0;
            let x1 = ops::add_row(x, &delta)?;
            let mid = start.elapsed();
            let out = ffn_forward(&x1, &p.norm2, &p.ffn)?.0;
            (x1, mid, 0, out)
        }
        BlockParams::Sgst(p) => {
            check_merge_rows(x, &p.w_m)?;
            let y = ops::layernorm_forward(x, &p.norm1.gamma, &p.norm1.beta, 1)?.0;
            let h = heatmap(&y, &p.w_h)?;
            let plan = GatherPlan::from_heatmap(&h);
            let active = active_branches(&plan, cfg.fg_only);
            let mut x1 = x.clone();
            if !active.is_empty() {
                let wn = normalize_merge(&p.w_m, cfg.merge_norm)?;
                for &branch in &active {
                    let idx = plan.indexes(branch);
                    let (merged, _) = merge(&y, &branch_coef(&h, branch)?, &wn)?;
                    let queries = ops::gather_rows(&y, idx)?;
                    let a = attention_forward(&queries, &merged, &p.attn, p.heads)?.0;
                    let upd = ops::add(&ops::gather_rows(x, idx)?, &a)?;
                    ops::scatter_rows(&mut x1, idx, &upd)?;
                }
            }
            let mid = start.elapsed();
            let mut out = x.clone();
            for &branch in &active {
                let idx = plan.indexes(branch);
                let upd = ffn_forward(&ops::gather_rows(&x1, idx)?, &p.norm2, &p.ffn)?.0;
                ops::scatter_rows(&mut out, idx, &upd)?;
            }
            (x1, mid, plan.fg().len(), out)
        }
    };
    let block = start.elapsed();
    drop(x1);
    Ok(Timed {
        output: out,
        attention_s: mid.as_secs_f64(),
        block_s: block.as_secs_f64(),
        n_f,
    })
}

/// Benchmarks one `(block, N, C)` case; returns the attention-stage row
/// followed by the block row.
pub fn bench_case(kind: BlockKind, n: usize, c: usize, cfg: &BenchConfig, seed: u64) -> Result<[BenchRow; 2], BenchError> {
    let bc = cfg.block_config(n, c);
    bc.validate()?;
    let needed = working_set_bytes(kind, &bc);
    if needed > cfg.memory_cap_bytes {
        return Err(BenchError::MemoryCap {
            block: kind,
            n,
            c,
            needed,
            cap: cfg.memory_cap_bytes,
        });
    }
    let mut rng = Rng::new(seed);
    let params = BlockParams::init(kind, &bc, &mut rng)?;
    let x = DenseArray::uniform(&[n, c], -1.0, 1.0, &mut rng);
    for _ in 0..cfg.warmups {
        timed_forward(&x, &params, &bc)?;
    }
    let mut attention = Vec::with_capacity(cfg.repeats);
    let mut block = Vec::with_capacity(cfg.repeats);
    let mut n_f = 0;
    for _ in 0..cfg.repeats {
        let t = timed_forward(&x, &params, &bc)?;
        attention.push(t.attention_s);
        block.push(t.block_s);
        n_f = t.n_f;
    }
    let cost = flops_block(kind, &bc, n_f);
    let k = if kind == BlockKind::Sgst { bc.merged_tokens() } else { 0 };
    let row = |stage, samples: &[f64], flops| {
        let (median_s, iqr_s) = median_iqr(samples);
        BenchRow {
            block: kind,
            n,
            c,
            heads: cost.heads,
            k,
            stage,
            repeats: cfg.repeats,
            median_s,
            iqr_s,
            flops,
        }
    };
    let stage_flops = cost.mixer_total() + cost.item("norm1") + cost.item("residual1");
    Ok([row(Stage::Attention, &attention, stage_flops), row(Stage::Block, &block, cost.total())])
}

/// Every case of the grid in `(C, N, block)` order. All cases are checked
/// against the memory cap before any is timed.
pub fn run_bench(cfg: &BenchConfig, seed: u64, mut on_row: impl FnMut(&BenchRow)) -> Result<Vec<BenchRow>, BenchError> {
    cfg.validate()?;
    let mut cases = Vec::new();
    for &c in &cfg.channels {
        for &n in &cfg.tokens {
            for &kind in &cfg.blocks {
                let needed = working_set_bytes(kind, &cfg.block_config(n, c));
                if needed > cfg.memory_cap_bytes {
                    return Err(BenchError::MemoryCap {
                        block: kind,
                        n,
                        c,
                        needed,
                        cap: cfg.memory_cap_bytes,
                    });
                }
                cases.push((kind, n, c));
            }
        }
    }
    let mut rows = Vec::with_capacity(2 * cases.len());
    for (kind, n, c) in cases {
        for r in bench_case(kind, n, c, cfg, seed)? {
            on_row(&r);
            rows.push(r);
        }
    }
    Ok(rows)
}

pub fn write_csv<W: Write>(rows: &[BenchRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.block.to_string(),
            r.n.to_string(),
            r.c.to_string(),
            r.heads.to_string(),
            r.k.to_string(),
            r.stage.to_string(),
            r.repeats.to_string(),
            format!("{:e}", r.median_s),
            format!("{:e}", r.iqr_s),
            r.flops.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::block_forward;

    #[test]
    fn median_and_iqr() {
        assert_eq!(median_iqr(&[3.0]), (3.0, 0.0));
        assert_eq!(median_iqr(&[5.0, 1.0, 3.0]), (3.0, 2.0));
        let (m, iqr) = median_iqr(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert_eq!(iqr, 1.5);
    }

    #[test]
    fn timed_forward_matches_block_forward() {
        for kind in BlockKind::ALL {
            for fg_only in [false, true] {
                let cfg = BlockConfig {
                    heads: 2,
                    fg_only,
                    ..BlockConfig::new(8, 20)
                };
                let mut rng = Rng::new(3);
                let p = BlockParams::init(kind, &cfg, &mut rng).unwrap();
                let x = DenseArray::uniform(&[20, 8], -1.0, 1.0, &mut rng);
                let t = timed_forward(&x, &p, &cfg).unwrap();
                let (want, _) = block_forward(&x, &p, &cfg).unwrap();
                assert!(t.output.bit_eq(&want), "{kind} fg_only={fg_only}");
                assert!(t.attention_s <= t.block_s);
            }
        }
    }

    #[test]
    fn single_repeat_has_zero_iqr() {
        let cfg = BenchConfig {
            tokens: vec![16],
            channels: vec![8],
            repeats: 1,
            warmups: 0,
            ..BenchConfig::default()
        };
        let rows = run_bench(&cfg, 0, |_| {}).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| r.iqr_s == 0.0 && r.median_s > 0.0));
        let sgst: Vec<_> = rows.iter().filter(|r| r.block == BlockKind::Sgst).collect();
        assert!(sgst.iter().all(|r| r.k == 2));
        assert!(rows.iter().filter(|r| r.block != BlockKind::Sgst).all(|r| r.k == 0));
        for pair in rows.chunks(2) {
            assert!(pair[0].flops < pair[1].flops);
        }
    }

    #[test]
    fn memory_cap_refuses_before_timing() {
        let cfg = BenchConfig {
            tokens: vec![16, 1 << 20],
            channels: vec![8],
            memory_cap_bytes: 1 << 30,
            ..BenchConfig::default()
        };
        let mut seen = 0;
        let e = run_bench(&cfg, 0, |_| seen += 1).unwrap_err();
        assert_eq!(seen, 0);
        assert!(matches!(e, BenchError::MemoryCap { n: 1048576, .. }), "{e}");
        assert!(e.to_string().contains("memory cap"));
    }

    #[test]
    fn csv_has_documented_header() {
        let cfg = BenchConfig {
            blocks: vec![BlockKind::Cst],
            tokens: vec![9],
            channels: vec![8],
            repeats: 1,
            warmups: 0,
            ..BenchConfig::default()
        };
        let rows = run_bench(&cfg, 1, |_| {}).unwrap();
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("block,N,C,heads,K,stage,repeats,median_s,iqr_s,flops\n"));
        assert_eq!(text.lines().count(), 3);
    }
}
