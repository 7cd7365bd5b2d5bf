//! Run manifests: what was run, with which inputs, and the hash of every output.

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_digest: String,
    pub seed: Option<u64>,
    pub versions: Versions,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub outputs: Vec<OutputFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Versions {
    pub mrekf: String,
    pub mrekf_cli: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn now_unix() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

impl RunManifest {
    pub fn new(command: &str, config_digest: String, seed: Option<u64>, started_unix: f64) -> Self {
        Self {
            command: command.into(),
            config_digest,
            seed,
            versions: Versions { mrekf: mrekf::VERSION.into(), mrekf_cli: env!("CARGO_PKG_VERSION").into() },
            started_unix,
            finished_unix: started_unix,
            outputs: Vec::new(),
        }
    }

    /// Hash every regular file in `dir` except the manifest and write it.
    pub fn finish(mut self, dir: &Path) -> Result<(), CliError> {
        let mut names: Vec<String> = fs::read_dir(dir)
            .map_err(|e| CliError::io(dir, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n != MANIFEST_NAME)
            .collect();
        names.sort();
        self.outputs.clear();
        for name in names {
            let path = dir.join(&name);
            let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
            self.outputs.push(OutputFile { path: name, sha256: sha256_hex(&bytes), bytes: bytes.len() as u64 });
        }
        self.finished_unix = now_unix();
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        let path = dir.join(MANIFEST_NAME);
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
    }
}
