use isofuse::blocks::{BlockConfig, BlockKind, MergeRatio};
use isofuse::cost::{cost_sweep, flops_block, flops_cst, flops_mhsa, flops_sgst, write_csv, SweepConfig};
use proptest::prelude::*;

/// Projections and attention products from first principles: each of the
/// four `C × C` projections costs `2·rows·C²`, and scores plus weighted sum
/// cost `2·M·P·C` each summed over heads.
fn attention_oracle(m: u64, p: u64, c: u64) -> (u64, u64) {
    let proj = 2 * m * c * c + 2 * 2 * p * c * c + 2 * m * c * c;
    let core = 2 * m * p * c + 2 * m * p * c;
    (proj, core)
}

fn proj(r: &isofuse::cost::CostReport) -> u64 {
    ["q_proj", "k_proj", "v_proj", "o_proj"].iter().map(|i| r.item(i)).sum()
}

proptest! {
    #[test]
    fn mhsa_matches_first_principles(n in 1u64..600, c_mult in 1u64..17, heads in prop_oneof![Just(1u64), Just(2), Just(4)]) {
        let c = 4 * c_mult;
        let r = flops_mhsa(n as usize, c as usize, heads as usize);
        let (p, core) = attention_oracle(n, n, c);
        prop_assert_eq!(proj(&r), p);
        prop_assert_eq!(r.attention_core(), core);
        prop_assert_eq!(r.item("attn_softmax"), 4 * heads * n * n);
    }

    #[test]
    fn sgst_core_depends_on_k_not_split(n in 2u64..500, k_div in 1u64..40, c_mult in 1u64..9) {
        let c = 8 * c_mult;
        let k = n.div_ceil(k_div);
        let a = flops_sgst(n as usize, c as usize, 1, k as usize, 1);
        let b = flops_sgst(n as usize, c as usize, 1, k as usize, (n - 1) as usize);
        prop_assert_eq!(a.attention_core(), 4 * n * k * c);
        prop_assert_eq!(a.attention_core(), b.attention_core());
        // one merge per branch, each 2·N·K·C
        prop_assert_eq!(a.item("merge"), 2 * 2 * n * k * c);
    }
}

#[test]
fn cst_mixer_is_tiny_next_to_attention() {
    for n in [256, 1024, 4096] {
        for c in [64, 256, 512] {
            let ratio = flops_cst(n, c, 4).total() as f64 / flops_mhsa(n, c, 1).total() as f64;
            assert!(ratio < 0.02, "N={n} C={c}: {ratio}");
        }
    }
}

#[test]
fn block_totals_include_ffn_and_norms() {
    let cfg = BlockConfig::new(64, 256);
    for kind in BlockKind::ALL {
        let r = flops_block(kind, &cfg, 128);
        let ffn: u64 = r.items.iter().filter(|(k, _)| k.starts_with("ffn_")).map(|(_, v)| v).sum();
        // two matmuls of 2·N·C·4C each plus biases and relu
        assert!(ffn >= 2 * 2 * 256 * 64 * 256, "{kind}");
        assert!(r.item("norm1") > 0 && r.item("norm2") > 0, "{kind}");
        assert!(r.mixer_total() + ffn < r.total());
    }
}

#[test]
fn sweep_csv_has_one_total_per_report() {
    let cfg = SweepConfig {
        tokens: vec![64, 256],
        channels: vec![32],
        heads: 1,
        ctx_reduction: 4,
        ratios: vec![MergeRatio::ONE_NINTH, MergeRatio::ONE],
    };
    let rows = cost_sweep(&cfg);
    assert_eq!(rows.len(), cfg.grid_size());
    let mut buf = Vec::new();
    write_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("block,N,C,heads,K,item,flops\n"));
    let totals: Vec<&str> = text.lines().filter(|l| l.contains(",total,")).collect();
    assert_eq!(totals.len(), rows.len());
    // K = ceil(N / 9) for the 1/9 ratio, and non-merging rows carry K = 0
    assert!(totals.iter().any(|l| l.starts_with("sgst,256,32,1,29,")), "{totals:?}");
    assert!(totals.iter().any(|l| l.starts_with("sgst,64,32,1,8,")), "{totals:?}");
    assert!(totals.iter().any(|l| l.starts_with("cst,64,32,1,0,")), "{totals:?}");
}

#[test]
fn reduction_grows_with_tokens_at_fixed_ratio() {
    let c = 256;
    let ratios: Vec<f64> = [256usize, 1024, 4096, 16384]
        .iter()
        .map(|&n| flops_sgst(n, c, 1, n.div_ceil(9), n / 2).total() as f64 / flops_mhsa(n, c, 1).total() as f64)
        .collect();
    assert!(ratios.windows(2).all(|w| w[1] < w[0]), "{ratios:?}");
}
