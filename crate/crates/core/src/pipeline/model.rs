//! Stage-wise fusion and the toy decoder.

use crate::blocks::params::join;
use crate::blocks::{
    block_backward, block_forward, mix_backward, mix_tokens, BlockCache, BlockParams, FeatureMap,
    Linear, MixParams, ParamSet,
};
use crate::numerics::{ops, DenseArray, Rng};

use super::config::{IsomerConfig, STAGES};
use super::PipelineError;

/// Four stage features, finest first.
#[derive(Debug, Clone, PartialEq)]
pub struct StageStack {
    pub stages: Vec<FeatureMap>,
}

impl StageStack {
    pub fn new(stages: Vec<FeatureMap>) -> Result<Self, PipelineError> {
        if stages.len() != STAGES {
            return Err(PipelineError::Config(format!(
                "a stage stack has {STAGES} stages, got {}",
                stages.len()
            )));
        }
        Ok(Self { stages })
    }

    /// Random stack shaped for `cfg`.
    pub fn random(cfg: &IsomerConfig, rng: &mut Rng) -> Self {
        let sides = cfg.stage_sides();
        let stages = (0..STAGES)
            .map(|s| {
                let data = DenseArray::uniform(&[cfg.channels[s], sides[s], sides[s]], -1.0, 1.0, rng);
                FeatureMap::new(data).expect("rank 3")
            })
            .collect();
        Self { stages }
    }

    fn check(&self, cfg: &IsomerConfig, what: &str) -> Result<(), PipelineError> {
        let sides = cfg.stage_sides();
        for (s, fm) in self.stages.iter().enumerate() {
            let want = [cfg.channels[s], sides[s], sides[s]];
            if fm.data().shape() != want {
                return Err(PipelineError::Config(format!(
                    "{what} stage {}: expected shape {want:?}, got {:?}",
                    s + 1,
                    fm.data().shape()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageParams {
    pub mix: MixParams,
    pub block: BlockParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    /// Per-stage `C_l → D` projections with bias.
    pub proj: Vec<Linear>,
    /// `D → 1` with bias.
    pub head: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsomerParams {
    pub stages: Vec<StageParams>,
    pub decoder: DecoderParams,
}

impl ParamSet for StageParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a DenseArray)) {
        self.mix.visit(&join(prefix, "mix"), f);
        self.block.visit(&join(prefix, "block"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut DenseArray)) {
        self.mix.visit_mut(&join(prefix, "mix"), f);
        self.block.visit_mut(&join(prefix, "block"), f);
    }
}

impl ParamSet for DecoderParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a DenseArray)) {
        for (i, p) in self.proj.iter().enumerate() {
            p.visit(&join(prefix, &format!("proj{}", i + 1)), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut DenseArray)) {
        for (i, p) in self.proj.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &format!("proj{}", i + 1)), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

impl ParamSet for IsomerParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a DenseArray)) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("stage{}", i + 1)), f);
        }
        self.decoder.visit(&join(prefix, "decoder"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut DenseArray)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("stage{}", i + 1)), f);
        }
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
    }
}

impl IsomerParams {
    /// Independent parameters per stage; each stage draws from its own
    /// forked stream so stage order never affects values.
    pub fn init(cfg: &IsomerConfig, seed: u64) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let root = Rng::new(seed);
        let mut stages = Vec::with_capacity(STAGES);
        let mut proj = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            let mut rng = root.fork(s as u64 + 1);
            let c = cfg.channels[s];
            stages.push(StageParams {
                mix: Linear::mixer(c, &mut rng),
                block: BlockParams::init(cfg.assignment[s], &cfg.block_config(s), &mut rng)?,
            });
            proj.push(Linear::init(c, cfg.decoder_width, true, &mut rng));
        }
        let mut rng = root.fork(STAGES as u64 + 1);
        let head = Linear::init(cfg.decoder_width, 1, true, &mut rng);
        Ok(Self {
            stages,
            decoder: DecoderParams { proj, head },
        })
    }
}

#[derive(Debug, Clone)]
pub struct StageCache {
    cat: DenseArray,
    block: BlockCache,
}

impl StageCache {
    pub fn block(&self) -> &BlockCache {
        &self.block
    }
}

fn fuse_stage(
    app: &FeatureMap,
    mot: &FeatureMap,
    p: &StageParams,
    cfg: &IsomerConfig,
    s: usize,
) -> Result<(FeatureMap, StageCache), PipelineError> {
    let (mixed, cat) = mix_tokens(&app.tokens(), &mot.tokens(), &p.mix)?;
    let (out, block) = block_forward(&mixed, &p.block, &cfg.block_config(s))?;
    let fm = FeatureMap::from_tokens(&out, app.height(), app.width())?;
    Ok((fm, StageCache { cat, block }))
}

/// Mixes and fuses every stage; stages are independent of each other.
pub fn isomer_fuse_forward(
    appearance: &StageStack,
    motion: &StageStack,
    params: &IsomerParams,
    cfg: &IsomerConfig,
) -> Result<(StageStack, Vec<StageCache>), PipelineError> {
    isomer_fuse_ordered(appearance, motion, params, cfg, [0, 1, 2, 3])
}

/// [`isomer_fuse_forward`] computing the stages in the given order. Results
/// are returned finest first whatever the order.
pub fn isomer_fuse_ordered(
    appearance: &StageStack,
    motion: &StageStack,
    params: &IsomerParams,
    cfg: &IsomerConfig,
    order: [usize; STAGES],
) -> Result<(StageStack, Vec<StageCache>), PipelineError> {
    appearance.check(cfg, "appearance")?;
    motion.check(cfg, "motion")?;
    for (s, (kind, p)) in cfg.assignment.iter().zip(&params.stages).enumerate() {
        if *kind != p.block.kind() {
            return Err(PipelineError::Config(format!(
                "stage {} is assigned {kind} but its parameters are {}",
                s + 1,
                p.block.kind()
            )));
        }
    }
    let mut seen = [false; STAGES];
    for &s in &order {
        if s >= STAGES || std::mem::replace(&mut seen[s], true) {
            return Err(PipelineError::Config(format!("{order:?} is not a stage permutation")));
        }
    }
    let mut slots: Vec<Option<(FeatureMap, StageCache)>> = vec![None; STAGES];
    for s in order {
        slots[s] = Some(fuse_stage(&appearance.stages[s], &motion.stages[s], &params.stages[s], cfg, s)?);
    }
    let (fused, caches) = slots.into_iter().map(|o| o.expect("every stage computed")).unzip();
    Ok((StageStack { stages: fused }, caches))
}

pub fn isomer_fuse(
    appearance: &StageStack,
    motion: &StageStack,
    params: &IsomerParams,
    cfg: &IsomerConfig,
) -> Result<StageStack, PipelineError> {
    isomer_fuse_forward(appearance, motion, params, cfg).map(|(s, _)| s)
}

/// Nearest-neighbour source row in a `side_src²` grid for every pixel of a
/// `side_dst²` grid.
fn upsample_index(side_src: usize, side_dst: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(side_dst * side_dst);
    for i in 0..side_dst {
        let si = i * side_src / side_dst;
        for j in 0..side_dst {
            idx.push(si * side_src + j * side_src / side_dst);
        }
    }
    idx
}

#[derive(Debug, Clone)]
pub struct DecodeCache {
    tokens: Vec<DenseArray>,
    sum: DenseArray,
    index: Vec<Vec<usize>>,
}

fn linear_forward(x: &DenseArray, l: &Linear) -> Result<DenseArray, PipelineError> {
    let y = ops::matmul(x, &l.weight)?;
    Ok(match &l.bias {
        Some(b) => ops::add_row(&y, b)?,
        None => y,
    })
}

/// Returns `(dx, grads)` for `y = x·W + b`.
fn linear_backward(x: &DenseArray, l: &Linear, dy: &DenseArray) -> Result<(DenseArray, Linear), PipelineError> {
    let g = Linear {
        weight: ops::matmul(&ops::transpose(x)?, dy)?,
        bias: match l.bias {
            Some(_) => Some(ops::sum_rows(dy)?),
            None => None,
        },
    };
    Ok((ops::matmul(dy, &ops::transpose(&l.weight)?)?, g))
}

/// Per-stage projection to width `D`, nearest upsampling to stage 1, sum,
/// and a `D → 1` head. Logits are `1 × H₁ × W₁`.
pub fn decode_forward(
    fused: &StageStack,
    p: &DecoderParams,
) -> Result<(FeatureMap, DecodeCache), PipelineError> {
    let side1 = fused.stages[0].height();
    let mut sum: Option<DenseArray> = None;
    let mut tokens = Vec::with_capacity(STAGES);
    let mut index = Vec::with_capacity(STAGES);
    for (fm, proj) in fused.stages.iter().zip(&p.proj) {
        let t = fm.tokens();
        let z = linear_forward(&t, proj)?;
        let idx = upsample_index(fm.height(), side1);
        let up = ops::gather_rows(&z, &idx)?;
        sum = Some(match sum {
            None => up,
            Some(s) => ops::add(&s, &up)?,
        });
        tokens.push(t);
        index.push(idx);
    }
    let sum = sum.expect("four stages");
    let logits = linear_forward(&sum, &p.head)?;
    let fm = FeatureMap::from_tokens(&logits, side1, side1)?;
    Ok((fm, DecodeCache { tokens, sum, index }))
}

pub fn decode(fused: &StageStack, p: &DecoderParams) -> Result<FeatureMap, PipelineError> {
    decode_forward(fused, p).map(|(l, _)| l)
}

/// Returns per-stage token gradients and decoder gradients.
pub fn decode_backward(
    cache: &DecodeCache,
    p: &DecoderParams,
    d_logits: &DenseArray,
) -> Result<(Vec<DenseArray>, DecoderParams), PipelineError> {
    let d_logits = d_logits.reshape(&[d_logits.len(), 1])?;
    let (d_sum, head) = linear_backward(&cache.sum, &p.head, &d_logits)?;
    let mut d_tokens = Vec::with_capacity(STAGES);
    let mut proj = Vec::with_capacity(STAGES);
    for ((t, idx), l) in cache.tokens.iter().zip(&cache.index).zip(&p.proj) {
        let mut d_z = DenseArray::zeros(&[t.rows(), l.out_dim()]);
        for (dst, &src) in idx.iter().enumerate() {
            for (a, b) in d_z.row_mut(src).iter_mut().zip(d_sum.row(dst)) {
                *a += b;
            }
        }
        let (d_t, g) = linear_backward(t, l, &d_z)?;
        d_tokens.push(d_t);
        proj.push(g);
    }
    Ok((d_tokens, DecoderParams { proj, head }))
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub stages: Vec<StageCache>,
    pub decode: DecodeCache,
}

impl ForwardCache {
    /// Routing masks of all SGST stages, concatenated.
    pub fn routing(&self) -> Vec<bool> {
        self.stages.iter().flat_map(|c| c.block.routing()).collect()
    }

    /// Every discrete branch taken (routing and ReLU patterns), concatenated.
    pub fn regime(&self) -> Vec<bool> {
        self.stages.iter().flat_map(|c| c.block.regime()).collect()
    }
}

/// Fuse and decode.
pub fn forward(
    appearance: &StageStack,
    motion: &StageStack,
    params: &IsomerParams,
    cfg: &IsomerConfig,
) -> Result<(FeatureMap, ForwardCache), PipelineError> {
    let (fused, stages) = isomer_fuse_forward(appearance, motion, params, cfg)?;
    let (logits, decode) = decode_forward(&fused, &params.decoder)?;
    Ok((logits, ForwardCache { stages, decode }))
}

/// Gradients of a scalar loss with respect to params and both input stacks.
pub struct Gradients {
    pub params: IsomerParams,
    pub appearance: Vec<DenseArray>,
    pub motion: Vec<DenseArray>,
}

/// `d_logits` is `H₁·W₁` long in token order.
pub fn backward(
    cache: &ForwardCache,
    params: &IsomerParams,
    d_logits: &DenseArray,
) -> Result<Gradients, PipelineError> {
    let (d_tokens, decoder) = decode_backward(&cache.decode, &params.decoder, d_logits)?;
    let mut stages = Vec::with_capacity(STAGES);
    let mut d_app = Vec::with_capacity(STAGES);
    let mut d_mot = Vec::with_capacity(STAGES);
    for ((c, p), d_out) in cache.stages.iter().zip(&params.stages).zip(&d_tokens) {
        let (d_mixed, block) = block_backward(&c.block, &p.block, d_out)?;
        let (da, dm, mix) = mix_backward(&c.cat, &p.mix, &d_mixed)?;
        stages.push(StageParams { mix, block });
        d_app.push(da);
        d_mot.push(dm);
    }
    Ok(Gradients {
        params: IsomerParams { stages, decoder },
        appearance: d_app,
        motion: d_mot,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::BlockKind;

    fn tiny() -> IsomerConfig {
        IsomerConfig {
            resolution: 16,
            channels: [4, 4, 8, 8],
            decoder_width: 4,
            ..Default::default()
        }
    }

    #[test]
    fn output_shapes_follow_inputs() {
        let cfg = tiny();
        let p = IsomerParams::init(&cfg, 1).unwrap();
        let mut rng = Rng::new(2);
        let a = StageStack::random(&cfg, &mut rng);
        let m = StageStack::random(&cfg, &mut rng);
        let fused = isomer_fuse(&a, &m, &p, &cfg).unwrap();
        for (f, x) in fused.stages.iter().zip(&a.stages) {
            assert!(f.same_shape(x));
        }
        let logits = decode(&fused, &p.decoder).unwrap();
        assert_eq!(logits.data().shape(), &[1, 4, 4]);
    }

    #[test]
    fn zeroed_blocks_return_mixed_inputs() {
        let mut cfg = tiny();
        cfg.assignment = [BlockKind::Vanilla, BlockKind::Cst, BlockKind::Sgst, BlockKind::Cst];
        let mut p = IsomerParams::init(&cfg, 3).unwrap();
        for s in &mut p.stages {
            match &mut s.block {
                BlockParams::Vanilla(v) => {
                    v.attn.zero();
                    v.ffn.zero();
                }
                BlockParams::Cst(c) => {
                    c.t2.zero();
                    c.ffn.zero();
                }
                BlockParams::Sgst(g) => {
                    g.attn.zero();
                    g.ffn.zero();
                }
            }
        }
        let mut rng = Rng::new(4);
        let a = StageStack::random(&cfg, &mut rng);
        let m = StageStack::random(&cfg, &mut rng);
        let fused = isomer_fuse(&a, &m, &p, &cfg).unwrap();
        for s in 0..STAGES {
            let mixed = crate::blocks::mix(&a.stages[s], &m.stages[s], &p.stages[s].mix).unwrap();
            assert!(fused.stages[s].data().bit_eq(mixed.data()), "stage {}", s + 1);
        }
    }

    #[test]
    fn zero_features_and_head_bias_give_zero_logits() {
        let cfg = tiny();
        let mut p = IsomerParams::init(&cfg, 5).unwrap();
        for l in &mut p.decoder.proj {
            l.bias.as_mut().unwrap().fill(0.0);
        }
        p.decoder.head.bias.as_mut().unwrap().fill(0.0);
        let sides = cfg.stage_sides();
        let zero = StageStack::new(
            (0..STAGES).map(|s| FeatureMap::zeros(cfg.channels[s], sides[s], sides[s])).collect(),
        )
        .unwrap();
        let logits = decode(&zero, &p.decoder).unwrap();
        assert!(logits.data().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_assignment_is_rejected() {
        let cfg = tiny();
        let p = IsomerParams::init(&cfg, 1).unwrap();
        let mut other = cfg.clone();
        other.assignment[0] = BlockKind::Vanilla;
        let mut rng = Rng::new(2);
        let a = StageStack::random(&cfg, &mut rng);
        assert!(isomer_fuse(&a, &a, &p, &other).is_err());
    }

    #[test]
    fn upsample_index_nearest() {
        assert_eq!(upsample_index(1, 2), vec![0, 0, 0, 0]);
        assert_eq!(upsample_index(2, 4)[..4], [0, 0, 1, 1]);
        assert_eq!(upsample_index(2, 4)[8], 2);
    }
}
