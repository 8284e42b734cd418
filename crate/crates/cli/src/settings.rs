//! Resolved run settings: a TOML file merged with command-line flags.
//!
//! Every flag has a settings field, so the resolved settings alone
//! determine a run. A manifest written by a previous run is also accepted
//! as a config file; its `config` table is used.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use isofuse::bench::BenchConfig;
use isofuse::cost::SweepConfig;
use isofuse::pipeline::{IsomerConfig, RunConfig, TrainConfig};
use isofuse::verify::Suite;
use serde::{Deserialize, Serialize};

use crate::manifest::RunManifest;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    /// Base seed: verify cases, bench inputs, and parameter init for
    /// train and dump.
    pub seed: u64,
    /// Worker threads; above 1 the numerics layer runs in parallel.
    pub threads: usize,
    pub model: IsomerConfig,
    pub train: TrainConfig,
    pub bench: BenchConfig,
    pub cost: SweepConfig,
    pub verify: VerifySettings,
    pub eval: EvalSettings,
    pub dump: DumpSettings,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 1,
            model: IsomerConfig::default(),
            train: TrainConfig::default(),
            bench: BenchConfig::default(),
            cost: SweepConfig::default(),
            verify: VerifySettings::default(),
            eval: EvalSettings::default(),
            dump: DumpSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySettings {
    pub suite: String,
}

impl Default for VerifySettings {
    fn default() -> Self {
        Self { suite: "all".into() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum DumpKind {
    /// Spatial attention map of each shared-context stage.
    CstGmap,
    /// Foreground heatmap of each gathering stage.
    SgstHeatmap,
    /// Attention matrices of every stage, per head (and branch).
    AttnMatrix,
}

impl DumpKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DumpKind::CstGmap => "cst-gmap",
            DumpKind::SgstHeatmap => "sgst-heatmap",
            DumpKind::AttnMatrix => "attn-matrix",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DumpSettings {
    pub what: Option<DumpKind>,
    /// Parameters to load; freshly initialized from `seed` when absent.
    pub checkpoint: Option<PathBuf>,
    /// Clip frame to run.
    pub frame: usize,
}

impl Settings {
    /// Reads a settings file, or the `config` table of a run manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let table: toml::Table = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if table.contains_key("subcommand") {
            let m: RunManifest =
                toml::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))?;
            return Ok(m.config);
        }
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            model: self.model.clone(),
            train: self.train.clone(),
        }
    }

    pub fn suite(&self) -> Result<Suite> {
        Ok(self.verify.suite.parse()?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.threads == 0 {
            bail!("threads must be at least 1");
        }
        self.suite()?;
        self.model.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let s = Settings::default();
        let back: Settings = toml::from_str(&toml::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let s: Settings = toml::from_str("seed = 3\n[train]\nsteps = 5\n").unwrap();
        assert_eq!(s.seed, 3);
        assert_eq!(s.train.steps, 5);
        assert_eq!(s.model, IsomerConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<Settings>("[train]\nstep = 5\n").is_err());
    }
}
