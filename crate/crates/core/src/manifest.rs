use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Record of one CLI invocation and the files it produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_path: Option<PathBuf>,
    pub config_sha256: String,
    pub out_dir: PathBuf,
    /// Paths relative to `out_dir` mapped to their SHA-256.
    pub artifacts: BTreeMap<String, String>,
    /// Seconds since the Unix epoch; the only field that varies between reruns.
    pub created_unix: u64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn new(command: &str, config_path: Option<&Path>, config_text: &str, out_dir: &Path) -> Self {
        RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_path: config_path.map(Path::to_path_buf),
            config_sha256: hex::encode(Sha256::digest(config_text.as_bytes())),
            out_dir: out_dir.to_path_buf(),
            artifacts: BTreeMap::new(),
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        }
    }

    pub fn add(&mut self, path: &Path) -> Result<()> {
        let rel = path.strip_prefix(&self.out_dir).unwrap_or(path);
        let key = rel.to_string_lossy().replace('\\', "/");
        self.artifacts.insert(key, sha256_file(path)?);
        Ok(())
    }

    pub fn path_for(out_dir: &Path, command: &str) -> PathBuf {
        out_dir.join(format!("manifest-{command}.json"))
    }

    pub fn write(&self) -> Result<PathBuf> {
        let path = RunManifest::path_for(&self.out_dir, &self.command);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<RunManifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Malformed { path: path.to_path_buf(), message: e.to_string() })
    }
}
