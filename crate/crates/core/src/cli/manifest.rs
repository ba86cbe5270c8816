//! Per-directory record of how a command's outputs were produced.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::checksum64;

pub const FILE_NAME: &str = "manifest.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    /// Input path to content checksum (hex).
    pub inputs: BTreeMap<String, String>,
    /// Output path to content checksum (hex).
    pub outputs: BTreeMap<String, String>,
    pub wall_time_s: f64,
    pub versions: BTreeMap<String, String>,
}

pub fn file_checksum(path: &Path) -> Result<String> {
    Ok(format!("{:016x}", checksum64(&std::fs::read(path)?)))
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("entroscope".into(), env!("CARGO_PKG_VERSION").into());
        versions.insert("bitstream".into(), crate::codec::VERSION.to_string());
        Self {
            command: command.into(),
            seed,
            versions,
            ..Default::default()
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), file_checksum(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.insert(path.display().to_string(), file_checksum(path)?);
        Ok(())
    }

    /// Checksum of everything except the wall time.
    pub fn fingerprint(&self) -> u64 {
        let mut m = self.clone();
        m.wall_time_s = 0.0;
        checksum64(serde_json::to_string(&m).expect("manifest serializes").as_bytes())
    }

    /// Writes `manifest.json` into `dir`, replacing any earlier one.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(FILE_NAME), serde_json::to_string_pretty(self).expect("manifest serializes"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        serde_json::from_str(&std::fs::read_to_string(dir.join(FILE_NAME))?).map_err(|e| Error::format("manifest", e.to_string()))
    }
}
