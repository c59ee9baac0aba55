//! Run manifests: everything needed to regenerate a command's outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::format;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: PathBuf,
    pub sha256: String,
}

/// A summary number in decimal and in bit-exact hexadecimal form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Number {
    pub value: f64,
    pub hex: String,
}

impl Number {
    pub fn new(value: f64) -> Self {
        Number { value, hex: format::hex(value) }
    }

    pub fn exact(&self) -> Option<f64> {
        format::parse_hex(&self.hex)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: RunConfig,
    /// SHA-256 of the resolved config in canonical JSON
    pub config_hash: String,
    pub seed: u64,
    pub git_revision: String,
    pub threads: usize,
    pub wall_time_s: f64,
    pub passed: bool,
    pub summary: BTreeMap<String, Number>,
    pub outputs: Vec<OutputFile>,
}

pub fn config_hash(cfg: &RunConfig) -> String {
    let canonical = serde_json::to_vec(cfg).expect("config serializes");
    hex_digest(&canonical)
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex_digest(&bytes))
}

/// `git rev-parse HEAD` of the working directory, or `unknown`.
pub fn git_revision() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig, threads: usize) -> Self {
        Manifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config: config.clone(),
            config_hash: config_hash(config),
            seed: config.seed,
            git_revision: git_revision(),
            threads,
            wall_time_s: 0.0,
            passed: true,
            summary: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn record(&mut self, key: &str, value: f64) {
        self.summary.insert(key.into(), Number::new(value));
    }

    pub fn add_output(&mut self, path: &Path) -> Result<()> {
        let sha256 = file_digest(path)?;
        self.outputs.push(OutputFile { path: path.to_path_buf(), sha256 });
        Ok(())
    }

    pub fn finish(&mut self, elapsed: Duration, passed: bool) {
        self.wall_time_s = elapsed.as_secs_f64();
        self.passed = passed;
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Input { path: path.to_path_buf(), reason: e.to_string() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_round_trip_through_json() {
        let cfg = RunConfig::from_toml("[energy]\npreset = \"entropy\"\n").unwrap();
        let mut m = Manifest::new("energy", &cfg, 1);
        m.record("w", 0.1 + 0.2);
        m.record("tiny", 4.9e-324);
        let back: Manifest = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back.config, cfg);
        for (k, v) in &m.summary {
            assert_eq!(back.summary[k].exact().unwrap().to_bits(), v.value.to_bits());
        }
    }

    #[test]
    fn hash_tracks_the_resolved_config() {
        let a = RunConfig::from_toml("[energy]\npreset = \"entropy\"\n").unwrap();
        let mut b = a.clone();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.seed = 1;
        assert_ne!(config_hash(&a), config_hash(&b));
    }
}
