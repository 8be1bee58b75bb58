use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Provenance written next to every output as `<out>.manifest.json`.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub toolkit_version: String,
    pub threads: usize,
    pub duration_secs: f64,
    pub finished_unix_secs: u64,
}

pub struct ManifestBuilder {
    command: &'static str,
    start: Instant,
    threads: usize,
    inputs: BTreeMap<String, PathBuf>,
}

impl ManifestBuilder {
    pub fn start(command: &'static str, threads: usize) -> Self {
        ManifestBuilder {
            command,
            start: Instant::now(),
            threads,
            inputs: BTreeMap::new(),
        }
    }

    pub fn input(mut self, name: &str, path: &Path) -> Self {
        self.inputs.insert(name.into(), path.to_path_buf());
        self
    }

    /// Writes the manifest atomically to `<primary>.manifest.json`.
    pub fn finish(
        self,
        primary: &Path,
        outputs: Vec<PathBuf>,
        config: serde_json::Value,
        seed: Option<u64>,
    ) -> anyhow::Result<PathBuf> {
        let m = RunManifest {
            command: self.command.into(),
            config,
            seed,
            inputs: self.inputs,
            outputs,
            toolkit_version: env!("CARGO_PKG_VERSION").into(),
            threads: self.threads,
            duration_secs: self.start.elapsed().as_secs_f64(),
            finished_unix_secs: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        };
        let path = manifest_path(primary);
        let mut text = serde_json::to_string_pretty(&m)?;
        text.push('\n');
        specmix::write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}

pub fn manifest_path(primary: &Path) -> PathBuf {
    let mut s = primary.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// First 16 hex digits of the SHA-256 of `bytes`.
pub fn short_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
}
