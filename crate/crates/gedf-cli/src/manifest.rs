//! Run manifests: one JSON file per command invocation recording the
//! resolved configuration, seed, input/output digests and timing so a run
//! can be reproduced and its artifacts verified.

use std::collections::BTreeMap;
use std::path::Path;

use gedf::{GedfError, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: Value,
    /// path -> sha256 hex digest
    pub inputs: BTreeMap<String, String>,
    /// path -> sha256 hex digest
    pub outputs: BTreeMap<String, String>,
    pub timings_ms: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: Value) -> Self {
        Self {
            tool: "gedf".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            timings_ms: BTreeMap::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let digest = sha256_file(path)?;
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) -> Result<()> {
        let digest = sha256_file(path)?;
        self.outputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    pub fn add_timing(&mut self, name: &str, ms: f64) {
        self.timings_ms.insert(name.into(), ms);
    }

    /// Writes the manifest next to `primary_output` as `<name>.manifest.json`.
    pub fn write_beside(&self, primary_output: &Path) -> Result<()> {
        let mut name = primary_output
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        name.push_str(".manifest.json");
        let path = primary_output.with_file_name(name);
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| GedfError::Format(format!("manifest serialization: {e}")))?;
        std::fs::write(&path, text)?;
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)
        .map_err(|e| GedfError::Input(format!("cannot digest {}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}
