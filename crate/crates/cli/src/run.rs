use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{DateTime, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

#[derive(Serialize)]
struct InputRecord {
    path: PathBuf,
    sha256: Option<String>,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    version: &'static str,
    started: DateTime<Utc>,
    finished: DateTime<Utc>,
    config_sha256: String,
    seeds: serde_json::Value,
    inputs: Vec<InputRecord>,
    outputs: &'a [PathBuf],
    config: &'a RunConfig,
}

/// Bookkeeping for one command: declared inputs and outputs, and the
/// run manifest written on success.
pub struct RunContext {
    pub command: &'static str,
    pub cfg: RunConfig,
    started: DateTime<Utc>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

fn file_sha256(path: &Path) -> Option<String> {
    if !path.is_file() {
        return None;
    }
    let bytes = fs::read(path).ok()?;
    Some(hex::encode(Sha256::digest(&bytes)))
}

impl RunContext {
    pub fn new(command: &'static str, cfg: RunConfig) -> Result<Self> {
        fs::create_dir_all(&cfg.paths.outputs)
            .with_context(|| format!("creating {}", cfg.paths.outputs.display()))?;
        Ok(RunContext {
            command,
            cfg,
            started: Utc::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn input(&mut self, path: impl Into<PathBuf>) -> PathBuf {
        let p = path.into();
        self.inputs.push(p.clone());
        p
    }

    /// Registers an output file under the outputs directory.
    pub fn output(&mut self, name: &str) -> PathBuf {
        let p = self.cfg.paths.outputs.join(name);
        self.outputs.push(p.clone());
        p
    }

    /// Registers an output at an arbitrary location.
    pub fn output_at(&mut self, path: PathBuf) -> PathBuf {
        self.outputs.push(path.clone());
        path
    }

    /// Removes every registered output that exists.
    pub fn clean(&self) {
        for p in &self.outputs {
            if p.is_dir() {
                let _ = fs::remove_dir_all(p);
            } else if p.exists() {
                let _ = fs::remove_file(p);
            }
        }
    }

    pub fn finish(mut self, seeds: serde_json::Value) -> Result<PathBuf> {
        let manifest_path = self.output(&format!("{}.run.json", self.command));
        let config_sha256 = hex::encode(Sha256::digest(serde_json::to_vec(&self.cfg)?));
        let manifest = RunManifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            started: self.started,
            finished: Utc::now(),
            config_sha256,
            seeds,
            inputs: self
                .inputs
                .iter()
                .map(|p| InputRecord { path: p.clone(), sha256: file_sha256(p) })
                .collect(),
            outputs: &self.outputs,
            config: &self.cfg,
        };
        fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?)
            .with_context(|| format!("writing {}", manifest_path.display()))?;
        Ok(manifest_path)
    }
}
