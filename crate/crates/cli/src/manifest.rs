//! Per-run manifest: everything needed to repeat a run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use seqrl::config::RunConfig;

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub git_describe: String,
    pub version: &'static str,
    /// The full effective configuration; `config.txt` holds the same text.
    pub config: BTreeMap<String, String>,
    /// SHA-256 of every input file, keyed by path.
    pub data_hashes: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig, inputs: &[PathBuf]) -> Result<Self> {
        let mut data_hashes = BTreeMap::new();
        for p in inputs {
            data_hashes.insert(p.display().to_string(), sha256_file(p)?);
        }
        Ok(Self {
            command: command.into(),
            argv: std::env::args().collect(),
            seed: cfg.train.seed,
            git_describe: git_describe(),
            version: env!("CARGO_PKG_VERSION"),
            config: cfg.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            data_hashes,
        })
    }

    /// Writes `manifest.json` and the matching `config.txt` into `dir`.
    pub fn write(&self, dir: &Path, cfg: &RunConfig) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(dir.join("manifest.json"), json + "\n").context("writing manifest.json")?;
        fs::write(dir.join("config.txt"), cfg.to_text()).context("writing config.txt")?;
        Ok(())
    }
}
