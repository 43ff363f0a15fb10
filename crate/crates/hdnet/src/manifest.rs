//! Run manifests: every output file with its SHA-256.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, read, Result};
use crate::formats::write_json;

pub const FILE_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Path relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub config_paths: Vec<String>,
    pub seed: Option<u64>,
    pub output_dir: String,
    /// Sorted by path.
    pub artifacts: Vec<Artifact>,
    /// SHA-256 over the `path sha256` lines of all artifacts.
    pub tree_sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let path = entry.path();
        if path.is_dir() {
            walk(root, &path, out)?;
        } else if path.strip_prefix(root).map_or(true, |p| p != Path::new(FILE_NAME)) {
            out.push(path);
        }
    }
    Ok(())
}

impl RunManifest {
    /// Hashes every file under `dir` except an existing manifest.
    pub fn scan(command: &str, config_paths: Vec<String>, seed: Option<u64>, dir: &Path) -> Result<Self> {
        let mut files = Vec::new();
        walk(dir, dir, &mut files)?;
        let mut artifacts = files
            .iter()
            .map(|f| {
                let bytes = read(f)?;
                let rel = f.strip_prefix(dir).unwrap_or(f);
                let path = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
                Ok(Artifact { path, sha256: sha256_hex(&bytes), bytes: bytes.len() as u64 })
            })
            .collect::<Result<Vec<_>>>()?;
        artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        let listing: String = artifacts.iter().map(|a| format!("{} {}\n", a.path, a.sha256)).collect();
        Ok(Self {
            schema_version: 1,
            command: command.to_string(),
            config_paths,
            seed,
            output_dir: dir.display().to_string(),
            tree_sha256: sha256_hex(listing.as_bytes()),
            artifacts,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(FILE_NAME), self)
    }
}
