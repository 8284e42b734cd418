mod commands;
mod manifest;
mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use isofuse::blocks::{BlockKind, MergeRatio};
use isofuse::numerics::ops;
use isofuse::pipeline::STAGES;
use isofuse::verify::Suite;

use manifest::RunManifest;
use settings::{DumpKind, Settings};

#[derive(Debug, Parser)]
#[command(
    name = "isofuse",
    version,
    about = "Attention-fusion blocks: verification, cost sweeps, benchmarks, toy training and attention dumps"
)]
struct Cli {
    /// TOML settings file, or a manifest.toml from an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "isofuse-out")]
    out_dir: PathBuf,
    /// Worker threads; more than 1 enables parallel numerics.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run verification suites; exits nonzero if any check fails.
    Verify(VerifyArgs),
    /// Analytic FLOP sweep over token counts, channels and merge ratios.
    Cost(CostArgs),
    /// Median and IQR wall time of block forwards.
    Bench(BenchArgs),
    /// Train the toy pipeline on a synthetic clip.
    Train(TrainArgs),
    /// Per-frame IoU of a checkpoint on a synthetic clip.
    Eval(EvalArgs),
    /// Write attention maps, heatmaps or attention matrices.
    Dump(DumpArgs),
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    s.parse().map_err(|e: isofuse::verify::UnknownSuite| e.to_string())
}

fn parse_kind(s: &str) -> Result<BlockKind, String> {
    s.parse().map_err(|e: isofuse::blocks::BlockError| e.to_string())
}

fn parse_ratio(s: &str) -> Result<MergeRatio, String> {
    s.parse().map_err(|e: isofuse::blocks::BlockError| e.to_string())
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// oracles, gradients, properties, golden or all.
    #[arg(long, value_parser = parse_suite)]
    suite: Option<Suite>,
}

#[derive(Debug, Args)]
struct CostArgs {
    #[arg(long, value_delimiter = ',')]
    tokens: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<usize>>,
    /// Merge ratios such as 1/9.
    #[arg(long, value_delimiter = ',', value_parser = parse_ratio)]
    ratios: Option<Vec<MergeRatio>>,
    #[arg(long)]
    heads: Option<usize>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', value_parser = parse_kind)]
    blocks: Option<Vec<BlockKind>>,
    #[arg(long, value_delimiter = ',')]
    tokens: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<usize>>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    warmups: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long, value_parser = parse_ratio)]
    merge_ratio: Option<MergeRatio>,
    /// Working-set cap in MiB; larger cases are refused.
    #[arg(long)]
    memory_cap_mib: Option<u64>,
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[arg(long)]
    resolution: Option<usize>,
    /// Four block kinds, finest stage first, e.g. cst,cst,sgst,sgst.
    #[arg(long, value_delimiter = ',', value_parser = parse_kind)]
    assignment: Option<Vec<BlockKind>>,
    #[arg(long, value_parser = parse_ratio)]
    merge_ratio: Option<MergeRatio>,
    #[arg(long)]
    clip_seed: Option<u64>,
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Also checkpoint every this many steps.
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DumpArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum)]
    what: Option<DumpKind>,
    /// Parameters to use instead of a fresh initialization.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    frame: Option<usize>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn apply_model(s: &mut Settings, m: ModelArgs) -> Result<()> {
    set(&mut s.model.resolution, m.resolution);
    set(&mut s.model.merge_ratio, m.merge_ratio);
    set(&mut s.train.clip_seed, m.clip_seed);
    set(&mut s.train.frames, m.frames);
    if let Some(a) = m.assignment {
        s.model.assignment = <[BlockKind; STAGES]>::try_from(a.as_slice())
            .map_err(|_| anyhow::anyhow!("--assignment needs {STAGES} block kinds, got {}", a.len()))?;
    }
    Ok(())
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Verify(_) => "verify",
            Command::Cost(_) => "cost",
            Command::Bench(_) => "bench",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Dump(_) => "dump",
        }
    }

    /// Folds the subcommand's flags into the settings.
    fn apply(self, s: &mut Settings) -> Result<()> {
        match self {
            Command::Verify(a) => {
                if let Some(suite) = a.suite {
                    s.verify.suite = suite.to_string();
                }
            }
            Command::Cost(a) => {
                set(&mut s.cost.tokens, a.tokens);
                set(&mut s.cost.channels, a.channels);
                set(&mut s.cost.ratios, a.ratios);
                set(&mut s.cost.heads, a.heads);
            }
            Command::Bench(a) => {
                set(&mut s.bench.blocks, a.blocks);
                set(&mut s.bench.tokens, a.tokens);
                set(&mut s.bench.channels, a.channels);
                set(&mut s.bench.repeats, a.repeats);
                set(&mut s.bench.warmups, a.warmups);
                set(&mut s.bench.heads, a.heads);
                set(&mut s.bench.merge_ratio, a.merge_ratio);
                set(&mut s.bench.memory_cap_bytes, a.memory_cap_mib.map(|m| m << 20));
            }
            Command::Train(a) => {
                apply_model(s, a.model)?;
                set(&mut s.train.steps, a.steps);
                set(&mut s.train.lr, a.lr);
                set(&mut s.train.weight_decay, a.weight_decay);
                set(&mut s.train.checkpoint_every, a.checkpoint_every);
            }
            Command::Eval(a) => {
                apply_model(s, a.model)?;
                if a.checkpoint.is_some() {
                    s.eval.checkpoint = a.checkpoint;
                }
            }
            Command::Dump(a) => {
                apply_model(s, a.model)?;
                if a.what.is_some() {
                    s.dump.what = a.what;
                }
                if a.checkpoint.is_some() {
                    s.dump.checkpoint = a.checkpoint;
                }
                set(&mut s.dump.frame, a.frame);
            }
        }
        Ok(())
    }
}

fn resolve(cli: Cli) -> Result<(String, Settings, PathBuf)> {
    let mut s = match &cli.config {
        Some(path) => Settings::load(path)?,
        None => Settings::default(),
    };
    if let Some(seed) = cli.seed {
        s.seed = seed;
        s.train.seed = seed;
    }
    set(&mut s.threads, cli.threads);
    let name = cli.command.name().to_string();
    cli.command.apply(&mut s)?;
    s.validate()?;
    Ok((name, s, cli.out_dir))
}

fn run(name: &str, s: &Settings, out: &Path) -> Result<commands::Done> {
    match name {
        "verify" => commands::verify(s, out),
        "cost" => commands::cost(s, out),
        "bench" => commands::bench(s, out),
        "train" => commands::train_cmd(s, out),
        "eval" => commands::eval(s, out),
        "dump" => commands::dump(s, out),
        other => unreachable!("unknown subcommand {other}"),
    }
}

fn main_inner(cli: Cli) -> Result<bool> {
    let (name, settings, out) = resolve(cli)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(settings.threads)
        .build_global()
        .context("configuring the thread pool")?;
    ops::set_parallel(settings.threads > 1);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut manifest = RunManifest::start(&name, &settings);
    manifest.write(&out)?;
    let result = run(&name, &settings, &out);
    let (outputs, status, ok) = match &result {
        Ok(done) => {
            let status = done.failure.clone().map_or(Ok(()), Err);
            (done.outputs.clone(), status, done.failure.is_none())
        }
        Err(e) => (Vec::new(), Err(format!("{e:#}")), false),
    };
    manifest.finish(outputs, status);
    manifest.write(&out)?;
    match result {
        Ok(done) => {
            if let Some(f) = done.failure {
                eprintln!("{f}");
            }
            Ok(ok)
        }
        Err(e) => Err(e),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            if !matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match main_inner(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
