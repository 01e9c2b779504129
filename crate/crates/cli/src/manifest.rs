use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::Context;
use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};
use tod_core::config::PipelineConfig;

use crate::{CliError, CliResult};

#[derive(Debug, Clone, Serialize)]
pub struct Input {
    pub path: String,
    pub sha256: String,
}

/// What a command read and wrote. Together with a replay cassette this is
/// enough to redo the run byte for byte.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    command: String,
    args: Vec<String>,
    started_at: String,
    finished_at: Option<String>,
    seed: Option<u64>,
    config: Option<PipelineConfig>,
    inputs: BTreeMap<String, Input>,
    outputs: Vec<String>,
    #[serde(flatten)]
    extra: BTreeMap<String, Value>,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn text_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub fn json_hash<T: Serialize>(value: &T) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(value).expect("serializable")))
}

pub fn file_hash(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

impl Manifest {
    pub fn new(command: &str, args: Vec<String>) -> Self {
        Self {
            command: command.to_string(),
            args,
            started_at: now(),
            finished_at: None,
            seed: None,
            config: None,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            extra: BTreeMap::new(),
        }
    }

    pub fn command(&self) -> &str {
        &self.command
    }

    pub fn args(&self) -> &[String] {
        &self.args
    }

    pub fn config(&mut self, config: &PipelineConfig) {
        self.seed = Some(config.seed);
        self.config = Some(config.clone());
    }

    pub fn input(&mut self, name: &str, path: &Path, sha256: String) {
        self.inputs.insert(
            name.to_string(),
            Input {
                path: path.display().to_string(),
                sha256,
            },
        );
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn extra(&mut self, key: &str, value: Value) {
        self.extra.insert(key.to_string(), value);
    }

    pub fn write(&mut self, path: &Path) -> CliResult<()> {
        self.finished_at = Some(now());
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| CliError::input(e.into()))?;
        }
        fs::write(path, text)
            .with_context(|| format!("writing {}", path.display()))
            .map_err(CliError::input)
    }
}
