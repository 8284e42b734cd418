use isofuse::bench::timed_forward;
use isofuse::blocks::checkpoint::Checkpoint;
use isofuse::blocks::cst::context_delta;
use isofuse::blocks::{
    block_forward, cst_global_context, mhsa_forward, sgst_gather, AttentionParams, BlockConfig, BlockKind,
    BlockParams, CstParams, GatherPlan, ParamSet,
};
use isofuse::numerics::{io, ops, DenseArray, Rng};
use proptest::prelude::*;

fn kind_strategy() -> impl Strategy<Value = BlockKind> {
    prop_oneof![Just(BlockKind::Vanilla), Just(BlockKind::Cst), Just(BlockKind::Sgst)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_rows_are_distributions(seed in any::<u64>(), n in 1usize..12, heads in prop_oneof![Just(1usize), Just(2), Just(4)]) {
        let c = 8;
        let mut rng = Rng::new(seed);
        let p = AttentionParams::init(c, &mut rng);
        let x = DenseArray::uniform(&[n, c], -3.0, 3.0, &mut rng);
        let (_, cache) = mhsa_forward(&x, &p, heads).unwrap();
        prop_assert_eq!(cache.probs().len(), heads);
        for a in cache.probs() {
            for r in 0..n {
                let s: f64 = a.row(r).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                prop_assert!(a.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn cst_adds_one_delta_to_every_token(seed in any::<u64>(), n in 1usize..20) {
        let mut rng = Rng::new(seed);
        let cfg = BlockConfig::new(8, n);
        let p = CstParams::init(&cfg, &mut rng);
        let x = DenseArray::uniform(&[n, 8], -2.0, 2.0, &mut rng);
        let out = cst_global_context(&x, &p).unwrap();
        let (delta, _) = context_delta(&x, &p).unwrap();
        for i in 0..n {
            for j in 0..8 {
                prop_assert_eq!(out.row(i)[j].to_bits(), (x.row(i)[j] + delta.data()[j]).to_bits());
            }
        }
    }

    #[test]
    fn gather_plan_matches_heatmap(seed in any::<u64>(), n in 1usize..40) {
        let mut rng = Rng::new(seed);
        let cfg = BlockConfig::new(8, n);
        let BlockParams::Sgst(p) = BlockParams::init(BlockKind::Sgst, &cfg, &mut rng).unwrap() else { unreachable!() };
        let x = DenseArray::uniform(&[n, 8], -2.0, 2.0, &mut rng);
        let g = sgst_gather(&x, &p).unwrap();
        prop_assert_eq!(g.q_f.rows() + g.q_b.rows(), n);
        for (t, &h) in g.heatmap.iter().enumerate() {
            prop_assert!(h > 0.0 && h < 1.0);
            prop_assert_eq!(g.plan.is_fg(t), h >= GatherPlan::THRESHOLD);
        }
    }

    #[test]
    fn staged_bench_forward_is_the_block_forward(seed in any::<u64>(), kind in kind_strategy(), n in 1usize..24, fg_only: bool) {
        let mut rng = Rng::new(seed);
        let cfg = BlockConfig { heads: 2, fg_only, ffn_ratio: 2, ..BlockConfig::new(8, n) };
        let p = BlockParams::init(kind, &cfg, &mut rng).unwrap();
        let x = DenseArray::uniform(&[n, 8], -1.0, 1.0, &mut rng);
        let t = timed_forward(&x, &p, &cfg).unwrap();
        prop_assert!(t.output.bit_eq(&block_forward(&x, &p, &cfg).unwrap().0));
    }

    #[test]
    fn block_checkpoints_round_trip(seed in any::<u64>(), kind in kind_strategy()) {
        let mut rng = Rng::new(seed);
        let cfg = BlockConfig { heads: 2, ..BlockConfig::new(8, 9) };
        let p = BlockParams::init(kind, &cfg, &mut rng).unwrap();
        let bytes = Checkpoint::from_params(&p, vec![("kind".into(), kind.to_string())]).to_bytes();
        let back = Checkpoint::from_bytes(&bytes, "mem").unwrap();
        prop_assert_eq!(back.meta("kind"), Some(kind.as_str()));
        let mut q = BlockParams::init(kind, &cfg, &mut Rng::new(seed ^ 1)).unwrap();
        back.restore(&mut q).unwrap();
        prop_assert_eq!(&q, &p);
        prop_assert_eq!(Checkpoint::from_params(&q, back.meta.clone()).to_bytes(), bytes);
    }

    #[test]
    fn tensor_formats_round_trip(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..6) {
        let mut rng = Rng::new(seed);
        let mut a = DenseArray::uniform(&[rows, cols], -1e6, 1e6, &mut rng);
        a.data_mut()[0] = 1e-300;
        prop_assert!(io::from_text(&io::to_text(&a)).unwrap().bit_eq(&a));
        let (b, used) = io::decode(&io::encode(&a), 0).unwrap();
        prop_assert!(b.bit_eq(&a));
        prop_assert_eq!(used, io::encoded_len(&a));
    }
}

#[test]
fn fg_only_passes_background_through() {
    let n = 30;
    let cfg = BlockConfig {
        fg_only: true,
        ..BlockConfig::new(8, n)
    };
    let mut rng = Rng::new(4);
    let p = BlockParams::init(BlockKind::Sgst, &cfg, &mut rng).unwrap();
    let x = DenseArray::uniform(&[n, 8], -1.0, 1.0, &mut rng);
    let (out, cache) = block_forward(&x, &p, &cfg).unwrap();
    let routing = cache.routing();
    assert!(routing.iter().any(|&f| !f), "seed gives no background token");
    for (t, &fg) in routing.iter().enumerate() {
        if !fg {
            assert_eq!(out.row(t), x.row(t));
        }
    }
}

#[test]
fn every_parameter_is_named_once() {
    let cfg = BlockConfig::new(8, 9);
    for kind in BlockKind::ALL {
        let p = BlockParams::init(kind, &cfg, &mut Rng::new(0)).unwrap();
        let mut names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
        let total = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), total, "{kind}");
    }
}

#[test]
fn softmax_of_constant_rows_is_uniform() {
    let s = ops::softmax(&DenseArray::filled(&[3, 4], 7.0), 1).unwrap();
    assert!(s.data().iter().all(|&v| v == 0.25));
}
