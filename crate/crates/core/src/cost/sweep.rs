use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{flops_cst, flops_mhsa, flops_sgst, CostReport};
use crate::blocks::MergeRatio;

pub const CSV_HEADER: [&str; 7] = ["block", "N", "C", "heads", "K", "item", "flops"];

/// Grid for [`cost_sweep`]. Token counts default to the four stage
/// resolutions of a 512×512 input at strides 4, 8, 16 and 32.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub tokens: Vec<usize>,
    pub channels: Vec<usize>,
    pub heads: usize,
    pub ctx_reduction: usize,
    pub ratios: Vec<MergeRatio>,
}

impl SweepConfig {
    pub fn stage_tokens(input: usize) -> Vec<usize> {
        [4, 8, 16, 32].iter().map(|s| (input / s) * (input / s)).collect()
    }

    /// Number of reports the sweep produces.
    pub fn grid_size(&self) -> usize {
        self.tokens.len() * self.channels.len() * (2 + self.ratios.len())
    }
}

impl Default for SweepConfig {
    fn default() -> Self {
        let r = |a, b| MergeRatio::new(a, b).expect("valid ratio");
        Self {
            tokens: Self::stage_tokens(512),
            channels: vec![64, 256, 512],
            heads: 1,
            ctx_reduction: 4,
            ratios: vec![r(1, 1), r(4, 9), r(1, 4), r(1, 9), r(1, 36)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub report: CostReport,
    /// Set for gathering-block rows.
    pub ratio: Option<MergeRatio>,
}

impl SweepRow {
    /// Token-mixing total relative to self-attention at the same `(N, C)`.
    pub fn ratio_to_mhsa(&self) -> f64 {
        let r = &self.report;
        r.mixer_total() as f64 / flops_mhsa(r.n, r.c, r.heads).total() as f64
    }
}

/// Token-mixing reports for every `(N, C)` in the grid: self-attention,
/// shared context, and the gathering block at each merge ratio with an
/// even foreground/background split.
pub fn cost_sweep(cfg: &SweepConfig) -> Vec<SweepRow> {
    let mut rows = Vec::with_capacity(cfg.grid_size());
    for &c in &cfg.channels {
        for &n in &cfg.tokens {
            rows.push(SweepRow {
                report: flops_mhsa(n, c, cfg.heads),
                ratio: None,
            });
            rows.push(SweepRow {
                report: flops_cst(n, c, cfg.ctx_reduction),
                ratio: None,
            });
            for &ratio in &cfg.ratios {
                let k = ratio.merged_tokens(n);
                rows.push(SweepRow {
                    report: flops_sgst(n, c, cfg.heads, k, n / 2),
                    ratio: Some(ratio),
                });
            }
        }
    }
    rows
}

/// One CSV line per report item plus a `total` line per report.
pub fn write_csv<W: Write>(rows: &[SweepRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for row in rows {
        let r = &row.report;
        let key = [r.block.clone(), r.n.to_string(), r.c.to_string(), r.heads.to_string(), r.k.to_string()];
        for (item, flops) in r.items.iter().map(|(k, v)| (k.as_str(), *v)).chain([("total", r.total())]) {
            let mut rec: Vec<String> = key.to_vec();
            rec.push(item.to_string());
            rec.push(flops.to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_size_and_tokens() {
        let cfg = SweepConfig::default();
        assert_eq!(cfg.tokens, vec![16384, 4096, 1024, 256]);
        assert_eq!(cost_sweep(&cfg).len(), cfg.grid_size());
        assert_eq!(cfg.grid_size(), 4 * 3 * 7);
    }

    #[test]
    fn totals_decrease_with_ratio() {
        let rows = cost_sweep(&SweepConfig::default());
        for chunk in rows.chunks(7) {
            let totals: Vec<u64> = chunk[2..].iter().map(|r| r.report.total()).collect();
            assert!(totals.windows(2).all(|w| w[0] > w[1]), "{totals:?}");
        }
    }

    #[test]
    fn csv_has_one_line_per_item_and_total() {
        let cfg = SweepConfig {
            tokens: vec![64],
            channels: vec![16],
            ..Default::default()
        };
        let rows = cost_sweep(&cfg);
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let expected: usize = rows.iter().map(|r| r.report.items.len() + 1).sum();
        assert_eq!(text.lines().count(), expected + 1);
        assert_eq!(text.lines().next().unwrap(), "block,N,C,heads,K,item,flops");
    }
}
