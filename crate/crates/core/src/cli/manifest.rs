//! Provenance record attached to every command output.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::embx::read_manifest;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize)]
pub struct InputRecord {
    pub path: String,
    /// sha256 of each raw tensor file, keyed by tensor name.
    pub checksums: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub inputs: Vec<InputRecord>,
    pub parameters: serde_json::Value,
    pub tool_version: String,
    pub timestamp: String,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn input_record(dir: &Path) -> Result<InputRecord> {
    let manifest = read_manifest(dir)?;
    let mut checksums = BTreeMap::new();
    for t in &manifest.tensors {
        checksums.insert(t.name.clone(), sha256_file(&dir.join(&t.file))?);
    }
    Ok(InputRecord {
        path: dir.display().to_string(),
        checksums,
    })
}

impl RunManifest {
    pub fn new(command: &str, inputs: &[&Path], parameters: impl Serialize) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            inputs: inputs.iter().map(|d| input_record(d)).collect::<Result<_>>()?,
            parameters: serde_json::to_value(parameters).expect("parameters serialize"),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        })
    }
}
