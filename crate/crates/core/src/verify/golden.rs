//! Fixture comparison.
//!
//! A fixture is a checkpoint file holding one operation's input `x`, its
//! parameters under `param.<name>`, and the reference output `expected`.
//! Meta keys: `op` (required) and the block options `heads`, `ffn_ratio`,
//! `ctx_reduction`, `merge_ratio`, `merge_norm`, `fg_only`.

use std::path::Path;

use crate::blocks::checkpoint::Checkpoint;
use crate::blocks::{
    cst_global_context, mhsa_forward, sgst_block_forward, vanilla_block_forward, AttentionParams, BlockConfig,
    BlockError, CstParams, ParamSet, SgstParams, VanillaParams,
};
use crate::numerics::{DenseArray, Rng};

use super::report::{CheckReport, Tolerance};

/// Fixtures produced by `scripts/golden.py` in 50-digit arithmetic.
pub const BUNDLED: [(&str, &[u8]); 4] = [
    ("mhsa", include_bytes!("../../fixtures/golden/mhsa.ckpt")),
    ("cst_global_context", include_bytes!("../../fixtures/golden/cst_global_context.ckpt")),
    ("vanilla_block", include_bytes!("../../fixtures/golden/vanilla_block.ckpt")),
    ("sgst_block", include_bytes!("../../fixtures/golden/sgst_block.ckpt")),
];

pub const GOLDEN_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GoldenOp {
    Mhsa,
    CstGlobalContext,
    VanillaBlock,
    SgstBlock,
}

impl GoldenOp {
    pub fn as_str(self) -> &'static str {
        match self {
            GoldenOp::Mhsa => "mhsa",
            GoldenOp::CstGlobalContext => "cst_global_context",
            GoldenOp::VanillaBlock => "vanilla_block",
            GoldenOp::SgstBlock => "sgst_block",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [GoldenOp::Mhsa, GoldenOp::CstGlobalContext, GoldenOp::VanillaBlock, GoldenOp::SgstBlock]
            .into_iter()
            .find(|o| o.as_str() == s)
    }
}

fn bad(origin: &str, reason: impl Into<String>) -> BlockError {
    BlockError::Checkpoint {
        path: origin.to_string(),
        reason: reason.into(),
    }
}

fn tensor<'a>(ck: &'a Checkpoint, name: &str, origin: &str) -> Result<&'a DenseArray, BlockError> {
    ck.tensors
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| bad(origin, format!("missing tensor '{name}'")))
}

fn block_config(ck: &Checkpoint, x: &DenseArray, origin: &str) -> Result<BlockConfig, BlockError> {
    if x.rank() != 2 {
        return Err(bad(origin, format!("input x must be rank 2, got {:?}", x.shape())));
    }
    let mut cfg = BlockConfig::new(x.cols(), x.rows());
    let num = |k: &str| -> Result<Option<usize>, BlockError> {
        ck.meta(k)
            .map(|v| v.parse().map_err(|_| bad(origin, format!("meta {k} '{v}' is not an integer"))))
            .transpose()
    };
    if let Some(h) = num("heads")? {
        cfg.heads = h;
    }
    if let Some(r) = num("ffn_ratio")? {
        cfg.ffn_ratio = r;
    }
    if let Some(r) = num("ctx_reduction")? {
        cfg.ctx_reduction = r;
    }
    if let Some(v) = ck.meta("merge_ratio") {
        cfg.merge_ratio = v.parse()?;
    }
    if let Some(v) = ck.meta("merge_norm") {
        cfg.merge_norm = v.parse()?;
    }
    if let Some(v) = ck.meta("fg_only") {
        cfg.fg_only = v == "true";
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Fills `template` from the fixture's `param.*` tensors by name.
fn load_params<P: ParamSet>(ck: &Checkpoint, template: &mut P, origin: &str) -> Result<(), BlockError> {
    let mut first_err = None;
    template.visit_mut("", &mut |name, t| {
        if first_err.is_some() {
            return;
        }
        match tensor(ck, &format!("param.{name}"), origin) {
            Ok(src) if src.shape() == t.shape() => *t = src.clone(),
            Ok(src) => {
                first_err = Some(BlockError::TensorMismatch {
                    name: name.clone(),
                    expected: format!("{:?}", t.shape()),
                    found: format!("{:?}", src.shape()),
                })
            }
            Err(e) => first_err = Some(e),
        }
    });
    first_err.map_or(Ok(()), Err)
}

/// Runs the fixture's operation on its input with the fast path.
pub fn run_fixture(ck: &Checkpoint, origin: &str) -> Result<DenseArray, BlockError> {
    let op_name = ck.meta("op").ok_or_else(|| bad(origin, "missing meta 'op'"))?;
    let op = GoldenOp::parse(op_name).ok_or_else(|| bad(origin, format!("unknown op '{op_name}'")))?;
    let x = tensor(ck, "x", origin)?;
    let cfg = block_config(ck, x, origin)?;
    let mut rng = Rng::new(0);
    match op {
        GoldenOp::Mhsa => {
            let mut p = AttentionParams::init(cfg.channels, &mut rng);
            load_params(ck, &mut p, origin)?;
            Ok(mhsa_forward(x, &p, cfg.heads)?.0)
        }
        GoldenOp::CstGlobalContext => {
            let mut p = CstParams::init(&cfg, &mut rng);
            load_params(ck, &mut p, origin)?;
            cst_global_context(x, &p)
        }
        GoldenOp::VanillaBlock => {
            let mut p = VanillaParams::init(&cfg, &mut rng);
            load_params(ck, &mut p, origin)?;
            vanilla_block_forward(x, &p)
        }
        GoldenOp::SgstBlock => {
            let mut p = SgstParams::init(&cfg, &mut rng);
            load_params(ck, &mut p, origin)?;
            sgst_block_forward(x, &p, &cfg)
        }
    }
}

/// Builds a fixture whose expected output is computed by the fast path.
pub fn make_fixture<P: ParamSet>(
    op: GoldenOp,
    x: &DenseArray,
    params: &P,
    meta: &[(&str, String)],
) -> Result<Checkpoint, BlockError> {
    let mut ck = Checkpoint {
        meta: std::iter::once(("op".to_string(), op.as_str().to_string()))
            .chain(meta.iter().map(|(k, v)| (k.to_string(), v.clone())))
            .collect(),
        tensors: vec![("x".to_string(), x.clone())],
    };
    params.visit("", &mut |n, t| ck.tensors.push((format!("param.{n}"), t.clone())));
    let out = run_fixture(&ck, "<generated>")?;
    ck.tensors.push(("expected".to_string(), out));
    Ok(ck)
}

pub fn compare_checkpoint(ck: &Checkpoint, origin: &str, tol: f64) -> Result<CheckReport, BlockError> {
    let name = format!("golden/{}", ck.meta("op").unwrap_or("?"));
    let mut r = CheckReport::new(name, Tolerance::Abs(tol), 0, origin.to_string());
    let expected = tensor(ck, "expected", origin)?;
    let got = run_fixture(ck, origin)?;
    if got.shape() != expected.shape() {
        r.error(format!("output shape {:?}, expected {:?}", got.shape(), expected.shape()));
        r.observe(f64::INFINITY, f64::INFINITY);
        return Ok(r.finish());
    }
    let (mut worst, mut at) = (0.0f64, 0usize);
    for (i, (a, b)) in got.data().iter().zip(expected.data()).enumerate() {
        let d = (a - b).abs();
        if d > worst || d.is_nan() {
            worst = d;
            at = i;
        }
    }
    let scale = expected.max_abs().max(f64::MIN_POSITIVE);
    r.observe(worst, worst / scale);
    if worst > tol {
        let cols = got.shape().last().copied().unwrap_or(1).max(1);
        r.note(format!(
            "max error at [{}, {}]: got {:e}, expected {:e}",
            at / cols,
            at % cols,
            got.data()[at],
            expected.data()[at]
        ));
    }
    Ok(r.finish())
}

pub fn golden_compare_bytes(bytes: &[u8], origin: &str, tol: f64) -> Result<CheckReport, BlockError> {
    compare_checkpoint(&Checkpoint::from_bytes(bytes, origin)?, origin, tol)
}

/// Loads a fixture file and compares the fast path against it.
pub fn golden_compare(path: &Path, tol: f64) -> Result<CheckReport, BlockError> {
    compare_checkpoint(&Checkpoint::load(path)?, &path.display().to_string(), tol)
}

/// Every bundled fixture; load errors become failed reports.
pub fn bundled_reports(tol: f64) -> Vec<CheckReport> {
    BUNDLED
        .iter()
        .map(|(name, bytes)| {
            golden_compare_bytes(bytes, &format!("bundled:{name}"), tol).unwrap_or_else(|e| {
                let mut r = CheckReport::new(format!("golden/{name}"), Tolerance::Abs(tol), 0, "");
                r.error(e.to_string());
                r.finish()
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Checkpoint {
        let mut rng = Rng::new(11);
        let cfg = BlockConfig::new(8, 5);
        let p = CstParams::init(&cfg, &mut rng);
        let x = DenseArray::uniform(&[5, 8], -1.0, 1.0, &mut rng);
        make_fixture(GoldenOp::CstGlobalContext, &x, &p, &[("ctx_reduction", "4".into())]).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let bytes = fixture().to_bytes();
        let r = golden_compare_bytes(&bytes, "mem", 0.0).unwrap();
        assert!(r.pass && r.max_abs_err == 0.0, "{}", r.line());
    }

    #[test]
    fn bundled_fixtures_match() {
        for r in bundled_reports(GOLDEN_TOL) {
            assert!(r.pass, "{} {:?}", r.line(), r.notes);
        }
    }

    #[test]
    fn perturbed_fixture_reports_location() {
        let mut ck = fixture();
        let (_, e) = ck.tensors.iter_mut().find(|(n, _)| n == "expected").unwrap();
        e.data_mut()[2 * 8 + 3] += 1e-6;
        let r = compare_checkpoint(&ck, "mem", GOLDEN_TOL).unwrap();
        assert!(!r.pass);
        assert!(r.notes[0].starts_with("max error at [2, 3]"), "{:?}", r.notes);
    }

    #[test]
    fn missing_and_corrupt_files_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("none.ckpt");
        let e = golden_compare(&missing, GOLDEN_TOL).unwrap_err().to_string();
        assert!(e.contains("none.ckpt"), "{e}");

        let mut bytes = fixture().to_bytes();
        let n = bytes.len();
        bytes.truncate(n - 4);
        let path = dir.path().join("cut.ckpt");
        std::fs::write(&path, &bytes).unwrap();
        let e = golden_compare(&path, GOLDEN_TOL).unwrap_err().to_string();
        assert!(e.contains("cut.ckpt") && e.contains("byte"), "{e}");
    }

    #[test]
    fn missing_parameter_is_named() {
        let mut ck = fixture();
        ck.tensors.retain(|(n, _)| n != "param.t2.bias");
        let e = run_fixture(&ck, "mem").unwrap_err().to_string();
        assert!(e.contains("param.t2.bias"), "{e}");
    }
}
