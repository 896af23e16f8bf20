use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chn::corpus;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const BUILD_ID: &str = concat!(env!("CARGO_PKG_VERSION"), "+", env!("CHN_GIT_REV"));

/// Everything needed to rerun a command, written before the work starts.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub build: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    /// SHA-256 of every input file.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>, config: serde_json::Value) -> Self {
        RunManifest {
            command: command.into(),
            build: BUILD_ID.into(),
            seed,
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let hash = corpus::file_hash(path)?;
        self.inputs.insert(path.display().to_string(), hash);
        Ok(())
    }

    pub fn output(&mut self, name: &str, path: impl Into<PathBuf>) {
        self.outputs.insert(name.into(), path.into());
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Json {
            path: path.into(),
            source: e,
        })?;
        fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
    }
}
