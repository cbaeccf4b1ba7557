use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use latent_bridge::training::sha256_hex;

/// Record of one command invocation: enough to re-run it identically.
#[derive(Clone, Debug)]
pub struct RunManifest {
    pub command: String,
    pub config_path: PathBuf,
    pub config_hash: String,
    pub seed: u64,
    /// `(label, path, sha256)` of every input and output artifact.
    pub artifacts: Vec<(String, PathBuf, String)>,
    pub wall_time: Duration,
    pub tool_version: &'static str,
}

impl RunManifest {
    pub fn new(command: String, config_path: &Path, config_hash: String, seed: u64) -> Self {
        RunManifest {
            command,
            config_path: config_path.to_path_buf(),
            config_hash,
            seed,
            artifacts: Vec::new(),
            wall_time: Duration::ZERO,
            tool_version: env!("CARGO_PKG_VERSION"),
        }
    }

    /// Hash the file at `path` and record it under `label`.
    pub fn artifact(&mut self, label: impl Into<String>, path: &Path) -> Result<()> {
        let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
        self.artifacts.push((label.into(), path.to_path_buf(), sha256_hex(&bytes)));
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command = {}", self.command);
        let _ = writeln!(s, "config_path = {}", self.config_path.display());
        let _ = writeln!(s, "config_hash = {}", self.config_hash);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "tool_version = {}", self.tool_version);
        let _ = writeln!(s, "wall_time_s = {:.3}", self.wall_time.as_secs_f64());
        for (label, path, hash) in &self.artifacts {
            let _ = writeln!(s, "artifact.{label} = {hash} {}", path.display());
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_text()).with_context(|| format!("writing manifest {}", path.display()))
    }
}
