use crate::blocks::params::jitter_norms;
use crate::blocks::{
    block_backward, block_forward, cst::context_delta, cst_global_context, mhsa_forward, sgst_block_forward_with_heatmap,
    sgst_branch_attend, sgst_scatter, vanilla_block_forward, BlockConfig, BlockError, BlockKind, BlockParams, CstParams,
    FeatureMap, GatherPlan, MergeNorm, MergeRatio, ParamSet, SgstParams, VanillaParams,
};
use crate::cost::{flops_block, measure_block};
use crate::numerics::{ops, DenseArray, Rng};
use crate::pipeline::model::{backward, forward};
use crate::pipeline::{isomer_fuse_ordered, IsomerConfig, IsomerParams, StageStack, STAGES};

use super::grad::{self, Exclusion, GradOutcome, Probe, Segment, REL_TOL, STEP};
use super::oracle;
use super::report::{CheckReport, Tolerance};

pub const ORACLE_TOL: f64 = 1e-10;
pub const CST_TOL: f64 = 1e-12;

pub fn describe(cfg: &BlockConfig) -> String {
    format!(
        "N={} C={} heads={} ffn_ratio={} ctx_reduction={} merge_ratio={} merge_norm={:?} fg_only={}",
        cfg.tokens, cfg.channels, cfg.heads, cfg.ffn_ratio, cfg.ctx_reduction, cfg.merge_ratio, cfg.merge_norm, cfg.fg_only
    )
}

fn errors(a: &DenseArray, b: &DenseArray) -> (f64, f64) {
    match a.max_abs_diff(b) {
        Some(d) => {
            let scale = a.max_abs().max(b.max_abs()).max(f64::MIN_POSITIVE);
            (d, d / scale)
        }
        None => (f64::INFINITY, f64::INFINITY),
    }
}

fn dot(a: &DenseArray, b: &DenseArray) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn random_dims(rng: &mut Rng, max_tokens: usize) -> (usize, usize, usize) {
    let n = 1 + rng.below(max_tokens);
    let c = [4, 8, 16, 32][rng.below(4)];
    let heads = [1, 2, 4][rng.below(3)];
    (n, c, heads)
}

fn small_config(n: usize, c: usize, heads: usize) -> BlockConfig {
    let mut cfg = BlockConfig::new(c, n);
    cfg.heads = heads;
    cfg.ffn_ratio = 2;
    cfg.ctx_reduction = 2;
    cfg
}

// ---------------------------------------------------------------- oracles

/// `mhsa_forward` against the brute-force oracle on random instances.
pub fn mhsa_oracle(seed: u64, cases: usize) -> CheckReport {
    let mut r = CheckReport::new("oracle/mhsa", Tolerance::Abs(ORACLE_TOL), seed, "N<=16 C<=32 heads in {1,2,4}");
    for i in 0..cases as u64 {
        let mut rng = Rng::new(seed + i);
        let (n, c, heads) = random_dims(&mut rng, 16);
        let p = crate::blocks::AttentionParams::init(c, &mut rng);
        let x = DenseArray::uniform(&[n, c], -2.0, 2.0, &mut rng);
        match mhsa_forward(&x, &p, heads) {
            Ok((fast, _)) => {
                let (a, rel) = errors(&fast, &oracle::oracle_mhsa(&x, &p, heads));
                r.observe(a, rel);
            }
            Err(e) => r.error(format!("seed {}: {e}", seed + i)),
        }
    }
    r.finish()
}

/// `sgst_branch_attend` against the oracle branch update.
pub fn branch_oracle(seed: u64, cases: usize) -> CheckReport {
    let mut r = CheckReport::new(
        "oracle/sgst-branch",
        Tolerance::Abs(ORACLE_TOL),
        seed,
        "M,K<=16 C<=32 heads in {1,2,4}",
    );
    for i in 0..cases as u64 {
        let mut rng = Rng::new(seed + i);
        let (m, c, heads) = random_dims(&mut rng, 16);
        let k = 1 + rng.below(16);
        let mut p = SgstParams::init(&small_config(m, c, heads), &mut rng);
        jitter_norms(&mut p, &mut rng);
        let residual = DenseArray::uniform(&[m, c], -2.0, 2.0, &mut rng);
        let queries = DenseArray::uniform(&[m, c], -2.0, 2.0, &mut rng);
        let merged = DenseArray::uniform(&[k, c], -2.0, 2.0, &mut rng);
        match sgst_branch_attend(&residual, &queries, &merged, &p) {
            Ok(fast) => {
                let (a, rel) = errors(&fast, &oracle::oracle_branch_attend(&residual, &queries, &merged, &p));
                r.observe(a, rel);
            }
            Err(e) => r.error(format!("seed {}: {e}", seed + i)),
        }
    }
    r.finish()
}

/// The whole vanilla block against the oracle block.
pub fn vanilla_oracle(seed: u64, cases: usize) -> CheckReport {
    let mut r = CheckReport::new("oracle/vanilla-block", Tolerance::Abs(ORACLE_TOL), seed, "N<=16 C<=32");
    for i in 0..cases as u64 {
        let mut rng = Rng::new(seed + i);
        let (n, c, heads) = random_dims(&mut rng, 16);
        let mut p = VanillaParams::init(&small_config(n, c, heads), &mut rng);
        jitter_norms(&mut p, &mut rng);
        let x = DenseArray::uniform(&[n, c], -2.0, 2.0, &mut rng);
        match vanilla_block_forward(&x, &p) {
            Ok(fast) => {
                let o = oracle::oracle_vanilla_block(&x, &p.norm1, &p.attn, &p.norm2, &p.ffn, p.heads);
                let (a, rel) = errors(&fast, &o);
                r.observe(a, rel);
            }
            Err(e) => r.error(format!("seed {}: {e}", seed + i)),
        }
    }
    r.finish()
}

/// Limit cases of the oracle itself: a single key returns its value, and
/// sharp scores over orthonormal keys select the matching value.
pub fn attention_limits(seed: u64) -> CheckReport {
    let mut r = CheckReport::new("oracle/limits", Tolerance::Abs(1e-12), seed, "M=P=1; orthonormal Q=K scale 200");
    let mut rng = Rng::new(seed);
    let v1 = DenseArray::uniform(&[1, 8], -1.0, 1.0, &mut rng);
    let q1 = DenseArray::uniform(&[1, 8], -1.0, 1.0, &mut rng);
    let k1 = DenseArray::uniform(&[1, 8], -1.0, 1.0, &mut rng);
    let (a, rel) = errors(&oracle::oracle_attention(&q1, &k1, &v1, 1.0), &v1);
    r.observe(a, rel);
    let eye = DenseArray::identity(6);
    let v = DenseArray::uniform(&[6, 4], -1.0, 1.0, &mut rng);
    let (a, rel) = errors(&oracle::oracle_attention(&eye, &eye, &v, 200.0), &v);
    r.observe(a, rel);
    r.finish()
}

/// `cst_global_context` against explicit rank-1 attention, plus bitwise
/// equality `out = x + δ` with one δ row shared by all tokens.
pub fn cst_oracle(seed: u64, cases: usize) -> CheckReport {
    let mut r = CheckReport::new("oracle/cst-as-attention", Tolerance::Abs(CST_TOL), seed, "N<=32 C<=32 ctx_reduction=2");
    for i in 0..cases as u64 {
        let mut rng = Rng::new(seed + i);
        let (n, c, _) = random_dims(&mut rng, 32);
        let mut p = CstParams::init(&small_config(n, c, 1), &mut rng);
        jitter_norms(&mut p, &mut rng);
        let x = DenseArray::uniform(&[n, c], -2.0, 2.0, &mut rng);
        let fast = match cst_global_context(&x, &p) {
            Ok(f) => f,
            Err(e) => {
                r.error(format!("seed {}: {e}", seed + i));
                continue;
            }
        };
        let (o, map) = oracle::oracle_cst_as_attention(&x, &p);
        let (a, rel) = errors(&fast, &o);
        r.observe(a, rel);
        if (0..n).any(|t| map.row(t) != map.row(0)) {
            r.fail_case(format!("seed {}: oracle attention rows differ", seed + i));
        }
        match shared_delta_violations(&x, &fast, &p) {
            Ok(0) => {}
            Ok(k) => r.fail_case(format!("seed {}: {k} entries differ from x + delta", seed + i)),
            Err(e) => r.error(format!("seed {}: {e}", seed + i)),
        }
    }
    r.finish()
}

/// Entries of `out` that are not bitwise `x[i][j] + δ[j]`.
fn shared_delta_violations(x: &DenseArray, out: &DenseArray, p: &CstParams) -> Result<usize, BlockError> {
    let (delta, _) = context_delta(x, p)?;
    let c = x.cols();
    Ok((0..x.len())
        .filter(|&k| out.data()[k].to_bits() != (x.data()[k] + delta.data()[k % c]).to_bits())
        .count())
}

/// Raw merge with `K = N`, identity merge matrix and every token forced to
/// the foreground must reproduce the vanilla block with the same weights.
pub fn sgst_reduces_to_vanilla(seed: u64, cases: usize) -> CheckReport {
    let mut r = CheckReport::new(
        "oracle/sgst-reduces-to-vanilla",
        Tolerance::Abs(ORACLE_TOL),
        seed,
        "K=N raw identity merge, heatmap forced to 1",
    );
    for i in 0..cases as u64 {
        let mut rng = Rng::new(seed + i);
        let (n, c, heads) = random_dims(&mut rng, 16);
        let mut cfg = small_config(n, c, heads);
        cfg.merge_ratio = MergeRatio::ONE;
        cfg.merge_norm = MergeNorm::Raw;
        let mut p = SgstParams::init(&cfg, &mut rng);
        jitter_norms(&mut p, &mut rng);
        p.w_m = DenseArray::identity(n);
        let v = VanillaParams {
            norm1: p.norm1.clone(),
            attn: p.attn.clone(),
            norm2: p.norm2.clone(),
            ffn: p.ffn.clone(),
            heads,
        };
        let x = DenseArray::uniform(&[n, c], -2.0, 2.0, &mut rng);
        let res = sgst_block_forward_with_heatmap(&x, &p, &cfg, &vec![1.0; n])
            .and_then(|(s, _)| Ok((s, vanilla_block_forward(&x, &v)?)));
        match res {
            Ok((s, v)) => {
                let (a, rel) = errors(&s, &v);
                r.observe(a, rel);
            }
            Err(e) => r.error(format!("seed {}: {e}", seed + i)),
        }
    }
    r.finish()
}

// -------------------------------------------------------------- gradients

fn segments<P: ParamSet + ?Sized>(p: &P) -> Vec<Segment> {
    p.named()
        .into_iter()
        .map(|(name, t)| Segment { name, len: t.len() })
        .collect()
}

/// Finite-difference check of one block at `(params, x)` for the loss
/// `Σ w ⊙ block(x)`, over every parameter and input coordinate.
pub fn check_block(params: &BlockParams, cfg: &BlockConfig, x: &DenseArray, w: &DenseArray) -> GradOutcome {
    let analytic = block_forward(x, params, cfg).and_then(|(_, cache)| block_backward(&cache, params, w));
    let (dx, g) = match analytic {
        Ok(v) => v,
        Err(e) => {
            return GradOutcome {
                failure: Some(format!("analytic pass: {e}")),
                ..Default::default()
            }
        }
    };
    let np = params.num_scalars();
    let mut segs = segments(params);
    segs.push(Segment { name: "x".into(), len: x.len() });
    let mut theta = params.flatten();
    theta.extend_from_slice(x.data());
    let mut ag = g.flatten();
    ag.extend_from_slice(dx.data());
    let probe = |t: &[f64]| -> Result<Probe, String> {
        let mut p = params.clone();
        p.assign_flat(&t[..np]);
        let xx = DenseArray::new(x.shape().to_vec(), t[np..].to_vec()).map_err(|e| e.to_string())?;
        let (out, cache) = block_forward(&xx, &p, cfg).map_err(|e| e.to_string())?;
        Ok(Probe {
            loss: dot(&out, w),
            routing: cache.routing(),
            regime: cache.regime(),
        })
    };
    grad::check(&theta, &ag, &segs, STEP, probe)
}

fn fold_outcome(r: &mut CheckReport, seed: u64, o: &GradOutcome) {
    r.observe(o.max_abs, o.max_rel);
    if let Some(f) = &o.failure {
        r.error(format!("seed {seed}: {f}"));
    }
    if o.max_rel >= REL_TOL {
        r.note(format!(
            "seed {seed}: tensor {} rel {:.3e}",
            o.worst_tensor.as_deref().unwrap_or("?"),
            o.max_rel
        ));
    }
    if let Some(w) = o.worst.as_ref().filter(|w| w.rel >= REL_TOL) {
        r.note(format!(
            "seed {seed}: coordinate {} analytic {:e} numeric {:e} rel {:.3e} (informational)",
            w.coordinate, w.analytic, w.numeric, w.rel
        ));
    }
    let fragile: Vec<&str> = o
        .excluded
        .iter()
        .filter(|(_, e)| *e == Exclusion::RoutingFragile)
        .map(|(c, _)| c.as_str())
        .collect();
    if !fragile.is_empty() {
        r.note(format!("seed {seed}: routing-fragile, excluded {}", fragile.join(" ")));
    }
    let kinks: Vec<&str> = o
        .excluded
        .iter()
        .filter(|(_, e)| *e == Exclusion::Kink)
        .map(|(c, _)| c.as_str())
        .collect();
    if !kinks.is_empty() {
        let shown = kinks.iter().take(6).copied().collect::<Vec<_>>().join(" ");
        let more = if kinks.len() > 6 { format!(" (+{} more)", kinks.len() - 6) } else { String::new() };
        r.note(format!("seed {seed}: relu kink, excluded {shown}{more}"));
    }
}

fn block_case(kind: BlockKind, cfg: &BlockConfig, seed: u64) -> Result<(BlockParams, DenseArray, DenseArray), BlockError> {
    let mut rng = Rng::new(seed);
    let mut params = BlockParams::init(kind, cfg, &mut rng)?;
    jitter_norms(&mut params, &mut rng);
    let x = DenseArray::uniform(&[cfg.tokens, cfg.channels], -1.0, 1.0, &mut rng);
    let w = DenseArray::uniform(&[cfg.tokens, cfg.channels], -1.0, 1.0, &mut rng);
    Ok((params, x, w))
}

/// Gradient check of `kind` under `cfg`, one random instance per seed.
pub fn grad_check(kind: BlockKind, cfg: &BlockConfig, seeds: &[u64]) -> CheckReport {
    grad_check_named(&format!("grad/{kind}"), kind, cfg, seeds)
}

pub fn grad_check_named(name: &str, kind: BlockKind, cfg: &BlockConfig, seeds: &[u64]) -> CheckReport {
    let mut r = CheckReport::new(name, Tolerance::Rel(REL_TOL), seeds.first().copied().unwrap_or(0), describe(cfg));
    for &s in seeds {
        match block_case(kind, cfg, s) {
            Ok((p, x, w)) => fold_outcome(&mut r, s, &check_block(&p, cfg, &x, &w)),
            Err(e) => r.error(format!("seed {s}: {e}")),
        }
    }
    r.finish()
}

/// SGST with token 0 placed a hair above the routing threshold
/// (`h₀ = 0.5 + 1e-12`). Perturbations that move token 0 across the
/// threshold must be detected and excluded as routing-fragile.
pub fn sgst_boundary(cfg: &BlockConfig, seed: u64) -> CheckReport {
    let mut r = CheckReport::new("grad/sgst-boundary", Tolerance::Rel(REL_TOL), seed, describe(cfg));
    let case = block_case(BlockKind::Sgst, cfg, seed).and_then(|(mut params, x, w)| {
        if let BlockParams::Sgst(p) = &mut params {
            let (y, _) = ops::layernorm_forward(&x, &p.norm1.gamma, &p.norm1.beta, 1)?;
            let y0 = y.row(0);
            let target = ((0.5 + 1e-12) / (0.5 - 1e-12) as f64).ln();
            let logit: f64 = y0.iter().zip(p.w_h.data()).map(|(a, b)| a * b).sum();
            let norm2: f64 = y0.iter().map(|v| v * v).sum();
            let alpha = (target - logit) / norm2;
            p.w_h.data_mut().iter_mut().zip(y0).for_each(|(w, y)| *w += alpha * y);
        }
        Ok((params, x, w))
    });
    match case {
        Ok((p, x, w)) => {
            if let Ok((_, crate::blocks::BlockCache::Sgst(c))) = block_forward(&x, &p, cfg) {
                r.note(format!("h0 = 0.5 + {:.3e}", c.heatmap()[0] - 0.5));
            }
            fold_outcome(&mut r, seed, &check_block(&p, cfg, &x, &w));
        }
        Err(e) => r.error(format!("seed {seed}: {e}")),
    }
    r.finish()
}

/// Default configuration of the full-pipeline gradient check: 8×8 input,
/// so stage sides are 2, 1, 1, 1.
pub fn pipeline_grad_config() -> IsomerConfig {
    IsomerConfig {
        resolution: 8,
        channels: [8; STAGES],
        ffn_ratio: 2,
        ctx_reduction: 2,
        decoder_width: 4,
        ..Default::default()
    }
}

fn flat_stack(s: &StageStack) -> Vec<f64> {
    s.stages.iter().flat_map(|f| f.data().data().to_vec()).collect()
}

fn stack_from(template: &StageStack, flat: &[f64]) -> Result<StageStack, String> {
    let mut at = 0;
    let mut stages = Vec::with_capacity(STAGES);
    for f in &template.stages {
        let n = f.data().len();
        let d = DenseArray::new(f.data().shape().to_vec(), flat[at..at + n].to_vec()).map_err(|e| e.to_string())?;
        stages.push(FeatureMap::new(d).map_err(|e| e.to_string())?);
        at += n;
    }
    Ok(StageStack { stages })
}

/// Whole-network check: mixing, all four blocks and the decoder, with
/// respect to every parameter and both input stacks.
pub fn check_pipeline(cfg: &IsomerConfig, seed: u64) -> GradOutcome {
    let fail = |m: String| GradOutcome {
        failure: Some(m),
        ..Default::default()
    };
    let mut params = match IsomerParams::init(cfg, seed) {
        Ok(p) => p,
        Err(e) => return fail(e.to_string()),
    };
    let mut rng = Rng::new(seed).fork(0x6ead);
    jitter_norms(&mut params, &mut rng);
    let app = StageStack::random(cfg, &mut rng);
    let mot = StageStack::random(cfg, &mut rng);
    let side = cfg.stage_sides()[0];
    let w = DenseArray::uniform(&[side * side], -1.0, 1.0, &mut rng);

    let analytic = forward(&app, &mot, &params, cfg).and_then(|(_, cache)| backward(&cache, &params, &w));
    let g = match analytic {
        Ok(g) => g,
        Err(e) => return fail(format!("analytic pass: {e}")),
    };
    let mut ag = g.params.flatten();
    for (grads, stack) in [(&g.appearance, &app), (&g.motion, &mot)] {
        for (d, f) in grads.iter().zip(&stack.stages) {
            match FeatureMap::from_tokens(d, f.height(), f.width()) {
                Ok(fm) => ag.extend_from_slice(fm.data().data()),
                Err(e) => return fail(e.to_string()),
            }
        }
    }
    let np = params.num_scalars();
    let na = flat_stack(&app).len();
    let mut segs = segments(&params);
    for (tag, stack) in [("appearance", &app), ("motion", &mot)] {
        for (s, f) in stack.stages.iter().enumerate() {
            segs.push(Segment {
                name: format!("{tag}{}", s + 1),
                len: f.data().len(),
            });
        }
    }
    let mut theta = params.flatten();
    theta.extend(flat_stack(&app));
    theta.extend(flat_stack(&mot));

    let probe = |t: &[f64]| -> Result<Probe, String> {
        let mut p = params.clone();
        p.assign_flat(&t[..np]);
        let a = stack_from(&app, &t[np..np + na])?;
        let m = stack_from(&mot, &t[np + na..])?;
        let (logits, cache) = forward(&a, &m, &p, cfg).map_err(|e| e.to_string())?;
        Ok(Probe {
            loss: dot(logits.data(), &w),
            routing: cache.routing(),
            regime: cache.regime(),
        })
    };
    grad::check(&theta, &ag, &segs, STEP, probe)
}

pub fn pipeline_grad_check(cfg: &IsomerConfig, seeds: &[u64]) -> CheckReport {
    let desc = format!(
        "resolution={} channels={:?} assignment={:?} decoder_width={}",
        cfg.resolution, cfg.channels, cfg.assignment, cfg.decoder_width
    );
    let mut r = CheckReport::new("grad/pipeline", Tolerance::Rel(REL_TOL), seeds.first().copied().unwrap_or(0), desc);
    for &s in seeds {
        fold_outcome(&mut r, s, &check_pipeline(cfg, s));
    }
    r.finish()
}

/// The block configurations exercised by the gradient suite.
pub fn gradient_configs() -> Vec<(&'static str, BlockKind, BlockConfig)> {
    let vanilla = small_config(4, 8, 2);
    let cst = small_config(6, 8, 1);
    let mut sgst = small_config(9, 8, 2);
    sgst.merge_ratio = MergeRatio::new(4, 9).expect("valid ratio");
    let mut sgst_raw = sgst.clone();
    sgst_raw.merge_norm = MergeNorm::Raw;
    let mut sgst_fg = sgst.clone();
    sgst_fg.fg_only = true;
    vec![
        ("grad/vanilla", BlockKind::Vanilla, vanilla),
        ("grad/cst", BlockKind::Cst, cst),
        ("grad/sgst", BlockKind::Sgst, sgst),
        ("grad/sgst-raw-merge", BlockKind::Sgst, sgst_raw),
        ("grad/sgst-fg-only", BlockKind::Sgst, sgst_fg),
    ]
}

// ------------------------------------------------------------- properties

fn random_heatmap(rng: &mut Rng) -> Vec<f64> {
    let n = 1 + rng.below(64);
    let mode = rng.below(10);
    (0..n)
        .map(|_| match mode {
            0 => 1.0,
            1 => 0.0,
            _ => match rng.below(8) {
                0 => 0.5,
                1 => 0.5 - 1e-16,
                _ => rng.uniform(),
            },
        })
        .collect()
}

/// Partition exhaustive and disjoint, threshold respected, and scatter of
/// the gathered rows bitwise equal to the input.
pub fn gather_scatter_bijection(seed: u64, cases: usize) -> CheckReport {
    let mut r = CheckReport::new("property/gather-scatter", Tolerance::Exact, seed, "N<=64 heatmaps incl. exact 0.5");
    for i in 0..cases as u64 {
        let mut rng = Rng::new(seed + i);
        let h = random_heatmap(&mut rng);
        let n = h.len();
        let plan = GatherPlan::from_heatmap(&h);
        let mut seen = vec![0u8; n];
        plan.fg().iter().chain(plan.bg()).for_each(|&t| seen[t] += 1);
        let partition = seen.iter().all(|&c| c == 1) && plan.fg().len() + plan.bg().len() == n;
        let threshold = (0..n).all(|t| plan.is_fg(t) == (h[t] >= GatherPlan::THRESHOLD));
        let x = DenseArray::uniform(&[n, 1 + rng.below(8)], -1e3, 1e3, &mut rng);
        let round_trip = ops::gather_rows(&x, plan.fg())
            .and_then(|f| Ok((f, ops::gather_rows(&x, plan.bg())?)))
            .map_err(BlockError::from)
            .and_then(|(f, b)| sgst_scatter(&x, &plan, &f, &b));
        let ok = match round_trip {
            Ok(y) => y.bit_eq(&x),
            Err(_) => false,
        };
        r.observe(0.0, 0.0);
        if !(partition && threshold && ok) {
            r.fail_case(format!(
                "seed {}: partition={partition} threshold={threshold} round_trip={ok}",
                seed + i
            ));
        }
    }
    r.finish()
}

/// Computing the stages in a random order yields the same bits.
pub fn stage_order_independence(seed: u64, cases: usize) -> CheckReport {
    let cfg = IsomerConfig {
        resolution: 32,
        channels: [4, 4, 8, 8],
        decoder_width: 4,
        ..Default::default()
    };
    let mut r = CheckReport::new("property/stage-order", Tolerance::Exact, seed, "resolution=32 channels=[4,4,8,8]");
    for i in 0..cases as u64 {
        let s = seed + i;
        let mut rng = Rng::new(s);
        let mut order = [0, 1, 2, 3];
        rng.shuffle(&mut order);
        let res = IsomerParams::init(&cfg, s).and_then(|p| {
            let app = StageStack::random(&cfg, &mut rng);
            let mot = StageStack::random(&cfg, &mut rng);
            let (a, _) = isomer_fuse_ordered(&app, &mot, &p, &cfg, [0, 1, 2, 3])?;
            let (b, _) = isomer_fuse_ordered(&app, &mot, &p, &cfg, order)?;
            Ok(a.stages.iter().zip(&b.stages).all(|(x, y)| x.data().bit_eq(y.data())))
        });
        r.observe(0.0, 0.0);
        match res {
            Ok(true) => {}
            Ok(false) => r.fail_case(format!("seed {s}: order {order:?} changed the output")),
            Err(e) => r.error(format!("seed {s}: {e}")),
        }
    }
    r.finish()
}

/// Every token of a CST block receives the same context delta.
pub fn cst_shared_delta(seed: u64, cases: usize) -> CheckReport {
    let mut r = CheckReport::new("property/cst-shared-delta", Tolerance::Exact, seed, "N<=32 C<=32");
    for i in 0..cases as u64 {
        let mut rng = Rng::new(seed + i);
        let (n, c, _) = random_dims(&mut rng, 32);
        let p = CstParams::init(&small_config(n, c, 1), &mut rng);
        let x = DenseArray::uniform(&[n, c], -3.0, 3.0, &mut rng);
        r.observe(0.0, 0.0);
        match cst_global_context(&x, &p).and_then(|out| shared_delta_violations(&x, &out, &p)) {
            Ok(0) => {}
            Ok(k) => r.fail_case(format!("seed {}: {k} entries differ", seed + i)),
            Err(e) => r.error(format!("seed {}: {e}", seed + i)),
        }
    }
    r.finish()
}

/// Permuting the tokens of a vanilla block permutes its output.
pub fn vanilla_equivariance(seed: u64, cases: usize) -> CheckReport {
    let mut r = CheckReport::new("property/vanilla-equivariance", Tolerance::Abs(1e-12), seed, "N<=16 C<=32");
    for i in 0..cases as u64 {
        let mut rng = Rng::new(seed + i);
        let (n, c, heads) = random_dims(&mut rng, 16);
        let p = VanillaParams::init(&small_config(n, c, heads), &mut rng);
        let x = DenseArray::uniform(&[n, c], -2.0, 2.0, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let res = vanilla_block_forward(&x, &p).and_then(|y| {
            let px = ops::gather_rows(&x, &perm)?;
            Ok((ops::gather_rows(&y, &perm)?, vanilla_block_forward(&px, &p)?))
        });
        match res {
            Ok((a, b)) => {
                let (d, rel) = errors(&a, &b);
                r.observe(d, rel);
            }
            Err(e) => r.error(format!("seed {}: {e}", seed + i)),
        }
    }
    r.finish()
}

/// Analytic cost reports against instrumented counts, item by item.
pub fn flop_counts(seed: u64, cases_per_block: usize) -> CheckReport {
    let mut r = CheckReport::new("property/flop-counts", Tolerance::Exact, seed, "N<=24 C<=16 random options");
    let ratios = ["1/1", "4/9", "1/4", "1/9", "1/3"];
    for kind in BlockKind::ALL {
        for i in 0..cases_per_block as u64 {
            let s = seed + i;
            let mut rng = Rng::new(s);
            let (n, c, heads) = random_dims(&mut rng, 24);
            let c = c.min(16);
            let mut cfg = small_config(n, c, heads);
            cfg.merge_ratio = ratios[rng.below(ratios.len())].parse().expect("valid ratio");
            cfg.merge_norm = if rng.below(2) == 0 { MergeNorm::Softmax } else { MergeNorm::Raw };
            cfg.fg_only = rng.below(2) == 0;
            let res = BlockParams::init(kind, &cfg, &mut rng).and_then(|p| {
                let x = DenseArray::uniform(&[n, c], -1.0, 1.0, &mut rng);
                measure_block(&x, &p, &cfg)
            });
            r.observe(0.0, 0.0);
            match res {
                Ok(m) => {
                    let a = flops_block(kind, &cfg, m.n_f);
                    let diff = a.diff(&m.tally);
                    if !diff.is_empty() || a.peak_elements != m.tally.peak_elements {
                        r.fail_case(format!("{kind} seed {s} [{}]: {diff:?}", describe(&cfg)));
                    }
                }
                Err(e) => r.error(format!("{kind} seed {s}: {e}")),
            }
        }
    }
    r.finish()
}
