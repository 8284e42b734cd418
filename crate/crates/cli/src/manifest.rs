use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::settings::Settings;

pub const FILE_NAME: &str = "manifest.toml";

/// Record of one invocation, written to the output directory before any
/// work starts and rewritten when it ends. Passing it back via `--config`
/// re-runs with the same resolved settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub tool_version: String,
    pub seed: u64,
    pub threads: usize,
    pub parallel_numerics: bool,
    /// Milliseconds since the Unix epoch.
    pub started_unix_ms: u64,
    pub finished_unix_ms: Option<u64>,
    /// `running`, `ok`, or `failed: <reason>`.
    pub status: String,
    /// Files written, relative to the output directory.
    pub outputs: Vec<String>,
    pub config: Settings,
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

impl RunManifest {
    pub fn start(subcommand: &str, config: &Settings) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            threads: config.threads,
            parallel_numerics: config.threads > 1,
            started_unix_ms: now_ms(),
            finished_unix_ms: None,
            status: "running".into(),
            outputs: Vec::new(),
            config: config.clone(),
        }
    }

    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join(FILE_NAME);
        let text = toml::to_string(self).context("serializing manifest")?;
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn finish(&mut self, outputs: Vec<String>, status: Result<(), String>) {
        self.finished_unix_ms = Some(now_ms());
        self.outputs = outputs;
        self.status = match status {
            Ok(()) => "ok".into(),
            Err(e) => format!("failed: {e}"),
        };
    }
}
