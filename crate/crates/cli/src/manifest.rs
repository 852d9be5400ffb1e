use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crowd_cate::experiment::sha256_hex;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> std::io::Result<Self> {
        Ok(Self { path: path.display().to_string(), sha256: sha256_hex(&std::fs::read(path)?) })
    }
}

/// Record of one command invocation. The hash covers the command, config,
/// seeds and input contents; paths, outputs and duration are excluded so a
/// rerun into another directory yields the same hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub seeds: Vec<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub duration_secs: f64,
    pub hash: String,
}

pub struct RunRecorder {
    manifest: RunManifest,
    started: Instant,
}

impl RunRecorder {
    pub fn start(command: &str, config: BTreeMap<String, String>, seeds: Vec<u64>, inputs: &[&Path]) -> std::io::Result<Self> {
        let inputs = inputs.iter().map(|p| FileDigest::of(p)).collect::<std::io::Result<Vec<_>>>()?;
        let digests: Vec<&str> = inputs.iter().map(|d| d.sha256.as_str()).collect();
        let identity = json!({ "command": command, "config": config, "seeds": seeds, "inputs": digests });
        let hash = sha256_hex(identity.to_string().as_bytes());
        let manifest = RunManifest {
            command: command.into(),
            config,
            seeds,
            inputs,
            outputs: Vec::new(),
            duration_secs: 0.0,
            hash,
        };
        Ok(Self { manifest, started: Instant::now() })
    }

    pub fn hash(&self) -> &str {
        &self.manifest.hash
    }

    /// Hashes the outputs and writes the manifest next to the primary output.
    pub fn finish(mut self, primary: &Path, outputs: &[&Path]) -> std::io::Result<RunManifest> {
        self.manifest.outputs = outputs.iter().map(|p| FileDigest::of(p)).collect::<std::io::Result<Vec<_>>>()?;
        self.manifest.duration_secs = self.started.elapsed().as_secs_f64();
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(run_manifest_path(primary), text + "\n")?;
        Ok(self.manifest)
    }
}

/// `<artifact>.run.json`.
pub fn run_manifest_path(primary: &Path) -> PathBuf {
    let mut name = primary.as_os_str().to_owned();
    name.push(".run.json");
    PathBuf::from(name)
}
