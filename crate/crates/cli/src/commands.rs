use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use anyhow::{bail, Context, Result};
use isofuse::bench;
use isofuse::blocks::checkpoint::Checkpoint;
use isofuse::blocks::{BlockCache, Branch};
use isofuse::cost;
use isofuse::numerics::{io, DenseArray};
use isofuse::pipeline::model::forward;
use isofuse::pipeline::train::clip_for;
use isofuse::pipeline::{evaluate, train, IsomerParams, STAGES};
use isofuse::verify::{render_text, run_suite, write_summary};

use crate::settings::{DumpKind, Settings};

/// Files written (relative to the output directory) and, when the command
/// ran to completion but its result is a failure, the reason.
#[derive(Debug, Default)]
pub struct Done {
    pub outputs: Vec<String>,
    pub failure: Option<String>,
}

fn create(out: &Path, rel: &str) -> Result<BufWriter<File>> {
    let path = out.join(rel);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(&path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

pub fn verify(s: &Settings, out: &Path) -> Result<Done> {
    let suite = s.suite()?;
    let reports = run_suite(suite, s.seed);
    let text = render_text(&reports);
    print!("{text}");
    fs::write(out.join("report.txt"), &text).context("writing report.txt")?;
    write_summary(&reports, create(out, "summary.csv")?).context("writing summary.csv")?;
    let failed = reports.iter().filter(|r| !r.pass).count();
    Ok(Done {
        outputs: vec!["report.txt".into(), "summary.csv".into()],
        failure: (failed > 0).then(|| format!("{failed} of {} checks failed", reports.len())),
    })
}

pub fn cost(s: &Settings, out: &Path) -> Result<Done> {
    let rows = cost::cost_sweep(&s.cost);
    println!("block,N,C,heads,K,mixer_flops,ratio_to_mhsa");
    for r in &rows {
        let c = &r.report;
        println!(
            "{},{},{},{},{},{},{:.4}",
            c.block,
            c.n,
            c.c,
            c.heads,
            c.k,
            c.mixer_total(),
            r.ratio_to_mhsa()
        );
    }
    cost::write_csv(&rows, create(out, "cost.csv")?).context("writing cost.csv")?;
    Ok(Done {
        outputs: vec!["cost.csv".into()],
        failure: None,
    })
}

pub fn bench(s: &Settings, out: &Path) -> Result<Done> {
    let rows = bench::run_bench(&s.bench, s.seed, |r| {
        eprintln!(
            "{} N={} C={} K={} {}: median {:.6}s iqr {:.6}s",
            r.block, r.n, r.c, r.k, r.stage, r.median_s, r.iqr_s
        )
    })?;
    bench::write_csv(&rows, create(out, "bench.csv")?).context("writing bench.csv")?;
    let mut buf = Vec::new();
    bench::write_csv(&rows, &mut buf)?;
    print!("{}", String::from_utf8_lossy(&buf));
    Ok(Done {
        outputs: vec!["bench.csv".into()],
        failure: None,
    })
}

fn checkpoint_meta(s: &Settings, step: usize) -> Vec<(String, String)> {
    vec![
        ("step".into(), step.to_string()),
        ("seed".into(), s.train.seed.to_string()),
        ("clip_seed".into(), s.train.clip_seed.to_string()),
    ]
}

pub fn train_cmd(s: &Settings, out: &Path) -> Result<Done> {
    let run = s.run_config();
    let mut outputs = vec!["metrics.csv".to_string()];
    let mut metrics = csv::Writer::from_writer(create(out, "metrics.csv")?);
    fs::create_dir_all(out.join("checkpoints")).context("creating checkpoints directory")?;
    let every = run.train.checkpoint_every;
    let report_every = (run.train.steps / 10).max(1);
    let mut io_err: Option<anyhow::Error> = None;
    let outcome = train(&run, |row, params| {
        if let Err(e) = metrics.serialize(row) {
            io_err.get_or_insert(e.into());
        }
        if row.step % report_every == 0 {
            eprintln!("step {}: loss {:.6} iou {:.4}", row.step, row.loss, row.iou);
        }
        if every > 0 && row.step % every == 0 {
            let rel = format!("checkpoints/step-{:06}.ckpt", row.step);
            match Checkpoint::from_params(params, checkpoint_meta(s, row.step)).save(&out.join(&rel)) {
                Ok(()) => outputs.push(rel),
                Err(e) => {
                    io_err.get_or_insert(e.into());
                }
            }
        }
        Ok(())
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }
    metrics.flush().context("writing metrics.csv")?;
    let rel = "checkpoints/final.ckpt".to_string();
    Checkpoint::from_params(&outcome.params, checkpoint_meta(s, run.train.steps)).save(&out.join(&rel))?;
    outputs.push(rel);
    println!("steps {}", run.train.steps);
    if let Some(last) = outcome.metrics.last() {
        println!("final loss {:.6}", last.loss);
    }
    println!("final IoU {:.6}", outcome.final_iou);
    Ok(Done { outputs, failure: None })
}

fn load_params(s: &Settings, checkpoint: Option<&Path>) -> Result<IsomerParams> {
    let mut params = IsomerParams::init(&s.model, s.train.seed)?;
    if let Some(path) = checkpoint {
        Checkpoint::load(path)?
            .restore(&mut params)
            .with_context(|| format!("checkpoint {} does not fit the model config", path.display()))?;
    }
    Ok(params)
}

pub fn eval(s: &Settings, out: &Path) -> Result<Done> {
    let Some(path) = s.eval.checkpoint.as_deref() else {
        bail!("eval needs a checkpoint (--checkpoint or [eval] checkpoint)");
    };
    let params = load_params(s, Some(path))?;
    let clip = clip_for(&s.run_config())?;
    let scores = evaluate(&params, &clip, &s.model)?;
    let mut w = csv::Writer::from_writer(create(out, "eval.csv")?);
    w.write_record(["frame", "iou"])?;
    for (t, v) in scores.iter().enumerate() {
        println!("frame {t}: IoU {v:.6}");
        w.write_record([t.to_string(), v.to_string()])?;
    }
    let mean = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
    w.write_record(["mean".to_string(), mean.to_string()])?;
    w.flush()?;
    println!("mean IoU {mean:.6}");
    Ok(Done {
        outputs: vec!["eval.csv".into()],
        failure: None,
    })
}

fn save_tensor(out: &Path, name: &str, t: &DenseArray, outputs: &mut Vec<String>) -> Result<()> {
    fs::create_dir_all(out.join("dump")).context("creating dump directory")?;
    for (ext, text) in [("isot", false), ("txt", true)] {
        let rel = format!("dump/{name}.{ext}");
        let path = out.join(&rel);
        if text {
            io::save_text(t, &path)?;
        } else {
            io::save_binary(t, &path)?;
        }
        outputs.push(rel);
    }
    Ok(())
}

pub fn dump(s: &Settings, out: &Path) -> Result<Done> {
    let Some(what) = s.dump.what else {
        bail!("dump needs --what (one of cst-gmap, sgst-heatmap, attn-matrix)");
    };
    let params = load_params(s, s.dump.checkpoint.as_deref())?;
    let clip = clip_for(&s.run_config())?;
    let frame = clip.frames.get(s.dump.frame).with_context(|| {
        format!("frame {} out of range: the clip has {} frames", s.dump.frame, clip.frames.len())
    })?;
    let (_, cache) = forward(&frame.appearance, &frame.motion, &params, &s.model)?;
    let sides = s.model.stage_sides();
    let mut outputs = Vec::new();
    for st in 0..STAGES {
        let side = sides[st];
        let tag = format!("stage{}", st + 1);
        match (what, cache.stages[st].block()) {
            (DumpKind::CstGmap, BlockCache::Cst(c)) => {
                let g = c.context().gmap().reshape(&[side, side])?;
                save_tensor(out, &format!("{tag}_gmap"), &g, &mut outputs)?;
            }
            (DumpKind::SgstHeatmap, BlockCache::Sgst(c)) => {
                let h = DenseArray::new(vec![side, side], c.heatmap().to_vec())?;
                save_tensor(out, &format!("{tag}_heatmap"), &h, &mut outputs)?;
            }
            (DumpKind::AttnMatrix, BlockCache::Vanilla(c)) => {
                for (h, p) in c.attention().probs().iter().enumerate() {
                    save_tensor(out, &format!("{tag}_vanilla_head{h}"), p, &mut outputs)?;
                }
            }
            (DumpKind::AttnMatrix, BlockCache::Cst(c)) => {
                // every query row is the shared map
                let g = c.context().gmap().data();
                let n = g.len();
                let rows: Vec<f64> = (0..n).flat_map(|_| g.iter().copied()).collect();
                let m = DenseArray::new(vec![n, n], rows)?;
                save_tensor(out, &format!("{tag}_cst"), &m, &mut outputs)?;
            }
            (DumpKind::AttnMatrix, BlockCache::Sgst(c)) => {
                for (branch, name) in [(Branch::Fg, "fg"), (Branch::Bg, "bg")] {
                    for (h, p) in c.attention(branch).unwrap_or_default().iter().enumerate() {
                        save_tensor(out, &format!("{tag}_sgst_{name}_head{h}"), p, &mut outputs)?;
                    }
                }
            }
            _ => {}
        }
    }
    if outputs.is_empty() {
        eprintln!("no stage produces {} under assignment {:?}", what.as_str(), s.model.assignment);
    }
    for o in outputs.iter().filter(|o| o.ends_with(".isot")) {
        println!("{o}");
    }
    Ok(Done { outputs, failure: None })
}
