use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use isofuse::numerics::io;

fn isofuse(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_isofuse"))
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> Output {
    let o = isofuse(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn read(dir: &Path, rel: &str) -> Vec<u8> {
    fs::read(dir.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

const SMALL: [&str; 8] = ["--resolution", "32", "--frames", "2", "--clip-seed", "3", "--assignment", "cst,vanilla,sgst,sgst"];

fn small_train(dir: &Path, steps: &str) -> Output {
    let mut args = vec!["--seed", "5", "train", "--steps", steps];
    args.extend(SMALL);
    ok(dir, &args)
}

#[test]
fn unknown_suite_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = isofuse(dir.path(), &["verify", "--suite", "gradient"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("unknown suite 'gradient'"), "{err}");
    assert!(err.contains("Usage"), "{err}");
}

#[test]
fn verify_all_is_reproducible_and_passes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let o = ok(a.path(), &["--seed", "7", "verify", "--suite", "all"]);
    ok(b.path(), &["--seed", "7", "verify", "--suite", "all"]);
    for f in ["report.txt", "summary.csv"] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f}");
    }
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("grad/pipeline") && text.contains("golden/sgst_block"), "{text}");
    let summary = String::from_utf8(read(a.path(), "summary.csv")).unwrap();
    assert!(summary.starts_with("name,pass,max_abs_err,max_rel_err"));
    assert!(summary.lines().skip(1).all(|l| l.split(',').nth(1) == Some("true")), "{summary}");
    let manifest = String::from_utf8(read(a.path(), "manifest.toml")).unwrap();
    assert!(manifest.contains("subcommand = \"verify\"") && manifest.contains("status = \"ok\""), "{manifest}");
}

#[test]
fn train_is_deterministic_and_reruns_from_manifest() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    small_train(a.path(), "15");
    small_train(b.path(), "15");
    let manifest = a.path().join("manifest.toml");
    ok(c.path(), &["--config", manifest.to_str().unwrap(), "train"]);
    let metrics = read(a.path(), "metrics.csv");
    let text = String::from_utf8(metrics.clone()).unwrap();
    assert!(text.starts_with("step,loss,iou\n"));
    assert_eq!(text.lines().count(), 16);
    for dir in [b.path(), c.path()] {
        assert_eq!(read(dir, "metrics.csv"), metrics);
        assert_eq!(read(dir, "checkpoints/final.ckpt"), read(a.path(), "checkpoints/final.ckpt"));
    }
}

#[test]
fn flags_override_config_and_land_in_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "seed = 1\n[train]\nsteps = 7\nframes = 2\n[model]\nresolution = 32\n").unwrap();
    let out = dir.path().join("out");
    ok(&out, &["--config", cfg.to_str().unwrap(), "train", "--steps", "3"]);
    let manifest = String::from_utf8(read(&out, "manifest.toml")).unwrap();
    assert!(manifest.contains("steps = 3"), "{manifest}");
    assert!(manifest.contains("resolution = 32"), "{manifest}");
    assert_eq!(String::from_utf8(read(&out, "metrics.csv")).unwrap().lines().count(), 4);
}

#[test]
fn untrained_checkpoint_scores_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    small_train(dir.path(), "0");
    let ckpt = dir.path().join("checkpoints/final.ckpt");
    let mut args = vec!["--seed", "5", "eval", "--checkpoint", ckpt.to_str().unwrap()];
    args.extend(SMALL);
    let o = ok(dir.path(), &args);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("frame 0: IoU") && text.contains("frame 1: IoU"), "{text}");
    let mean: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("mean IoU "))
        .unwrap()
        .parse()
        .unwrap();
    assert!((0.0..0.5).contains(&mean), "untrained IoU {mean}");
}

#[test]
fn eval_names_first_mismatched_tensor() {
    let dir = tempfile::tempdir().unwrap();
    small_train(dir.path(), "0");
    let ckpt = dir.path().join("checkpoints/final.ckpt");
    let o = isofuse(
        dir.path(),
        &[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--resolution",
            "32",
            "--assignment",
            "cst,cst,sgst,sgst",
        ],
    );
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("stage2.block."), "{err}");
    let manifest = String::from_utf8(read(dir.path(), "manifest.toml")).unwrap();
    assert!(manifest.contains("status = \"failed:"), "{manifest}");
}

fn dumped(dir: &Path, what: &str) -> Vec<(String, isofuse::numerics::DenseArray)> {
    let mut args = vec!["dump", "--what", what];
    args.extend(SMALL);
    ok(dir, &args);
    let mut files: Vec<PathBuf> = fs::read_dir(dir.join("dump"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "isot"))
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let t = io::load_binary(&p).unwrap();
            let text = io::load_text(&p.with_extension("txt")).unwrap();
            assert!(t.bit_eq(&text), "{}", p.display());
            (p.file_stem().unwrap().to_string_lossy().into_owned(), t)
        })
        .collect()
}

#[test]
fn dumps_are_normalized() {
    let d = tempfile::tempdir().unwrap();
    let g = dumped(d.path(), "cst-gmap");
    assert_eq!(g.len(), 1);
    assert_eq!(g[0].0, "stage1_gmap");
    assert_eq!(g[0].1.shape(), &[8, 8]);
    assert!((g[0].1.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);

    let d = tempfile::tempdir().unwrap();
    let h = dumped(d.path(), "sgst-heatmap");
    assert_eq!(h.len(), 2);
    assert!(h.iter().all(|(_, t)| t.data().iter().all(|&v| v > 0.0 && v < 1.0)));

    let d = tempfile::tempdir().unwrap();
    let a = dumped(d.path(), "attn-matrix");
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    assert!(names.contains(&"stage1_cst") && names.contains(&"stage2_vanilla_head0"), "{names:?}");
    assert!(names.iter().any(|n| n.starts_with("stage3_sgst_")), "{names:?}");
    for (n, t) in &a {
        for r in 0..t.rows() {
            let s: f64 = t.row(r).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12, "{n} row {r} sums to {s}");
        }
    }
}

#[test]
fn bench_and_cost_tables_share_keys() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &["bench", "--tokens", "81", "--channels", "16", "--repeats", "1", "--warmups", "0"],
    );
    ok(dir.path(), &["cost", "--tokens", "81", "--channels", "16", "--ratios", "1/9"]);
    let bench = String::from_utf8(read(dir.path(), "bench.csv")).unwrap();
    let cost = String::from_utf8(read(dir.path(), "cost.csv")).unwrap();
    assert!(bench.starts_with("block,N,C,heads,K,stage,repeats,median_s,iqr_s,flops\n"));
    let key = |l: &str| l.split(',').take(5).collect::<Vec<_>>().join(",");
    let cost_keys: Vec<String> = cost.lines().skip(1).map(key).collect();
    let rows: Vec<&str> = bench.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    for row in rows {
        assert!(cost_keys.contains(&key(row)), "{row} has no cost row");
        assert_eq!(row.split(',').nth(8), Some("0e0"), "repeats=1 gives zero IQR: {row}");
    }
}

#[test]
fn bench_refuses_oversized_cases() {
    let dir = tempfile::tempdir().unwrap();
    let o = isofuse(dir.path(), &["bench", "--tokens", "100000", "--channels", "256", "--memory-cap-mib", "1024"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("memory cap"), "{err}");
}
