//! Run directories and manifests.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::CliError;

pub const MANIFEST_FORMAT: &str = "amg-run-1";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct Timestamps {
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

/// Everything except `timestamps` is a function of the command, its config
/// and its input bytes.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub format: String,
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub config: Vec<(String, String)>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub timestamps: Timestamps,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

pub struct Run {
    pub dir: PathBuf,
    command: String,
    config: Config,
    inputs: Vec<Artifact>,
    outputs: Vec<Artifact>,
    started: u128,
}

impl Run {
    /// Creates `<out_dir>/run-s<seed>-<hash8>`, where the hash covers the
    /// command, the config snapshot and the input hashes.
    pub fn start(out_dir: &Path, command: &str, config: &Config, inputs: &[&Path]) -> Result<Run, CliError> {
        let mut artifacts = Vec::new();
        for p in inputs {
            let bytes = std::fs::read(p)
                .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.display())))?;
            artifacts.push(Artifact { path: p.display().to_string(), sha256: sha256_hex(&bytes) });
        }
        let mut key = format!("{command}\n");
        for (k, v) in config.snapshot() {
            key.push_str(&format!("{k}={v}\n"));
        }
        for a in &artifacts {
            key.push_str(&a.sha256);
            key.push('\n');
        }
        let hash = sha256_hex(key.as_bytes());
        let dir = out_dir.join(format!("run-s{}-{}", config.seed, &hash[..8]));
        std::fs::create_dir_all(&dir)?;
        Ok(Run {
            dir,
            command: command.into(),
            config: config.clone(),
            inputs: artifacts,
            outputs: Vec::new(),
            started: now_ms(),
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes)?;
        self.outputs.push(Artifact { path: name.into(), sha256: sha256_hex(bytes) });
        Ok(path)
    }

    pub fn finish(self) -> Result<PathBuf, CliError> {
        let manifest = RunManifest {
            format: MANIFEST_FORMAT.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: self.command,
            seed: self.config.seed,
            config: self.config.snapshot(),
            inputs: self.inputs,
            outputs: self.outputs,
            timestamps: Timestamps { started_unix_ms: self.started, finished_unix_ms: now_ms() },
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(self.dir.join("manifest.json"), json + "\n")?;
        Ok(self.dir)
    }
}
