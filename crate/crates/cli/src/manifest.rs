//! Run manifests: the resolved configuration, input digests, and outputs of a command.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::Value;

use crate::error::CliResult;
use crate::io::{sha256_file, write_text};

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub config: Value,
    pub threads: usize,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<PathBuf>,
    pub summary: Value,
    pub created_unix: u64,
    pub runtime_seconds: f64,
}

pub struct ManifestBuilder {
    command: &'static str,
    config: Value,
    threads: usize,
    inputs: Vec<InputDigest>,
    outputs: Vec<PathBuf>,
    summary: Value,
    start: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &'static str, config: &impl Serialize, threads: usize) -> CliResult<Self> {
        Ok(Self {
            command,
            config: serde_json::to_value(config)?,
            threads,
            inputs: Vec::new(),
            outputs: Vec::new(),
            summary: Value::Null,
            start: Instant::now(),
        })
    }

    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        self.inputs.push(InputDigest {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    /// Concatenated digests of all inputs.
    pub fn input_digest(&self) -> Option<String> {
        if self.inputs.is_empty() {
            return None;
        }
        Some(self.inputs.iter().map(|d| d.sha256.as_str()).collect::<Vec<_>>().join(":"))
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn summary(&mut self, summary: Value) {
        self.summary = summary;
    }

    pub fn write(self, path: &Path) -> CliResult<()> {
        let m = Manifest {
            tool: "dorqf",
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            config: self.config,
            threads: self.threads,
            inputs: self.inputs,
            outputs: self.outputs,
            summary: self.summary,
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            runtime_seconds: self.start.elapsed().as_secs_f64(),
        };
        write_text(path, &(serde_json::to_string_pretty(&m)? + "\n"))
    }
}
