//! Per-stage manifests: the config echo that produced a directory's
//! artifacts plus a content hash of each one.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Hash of `bytes` as a git blob in a SHA-256 repository:
/// `sha256("blob <len>\0" ++ bytes)`.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn file_hash(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    Ok(content_hash(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub seed: u64,
    pub config_echo: String,
    /// File name (relative to the manifest's directory) → content hash.
    pub artifacts: BTreeMap<String, String>,
}

impl Manifest {
    pub fn file_name(stage: &str) -> String {
        format!("{stage}.manifest.json")
    }

    /// Hashes `files` (relative to `dir`) and writes the manifest there.
    pub fn write(dir: impl AsRef<Path>, stage: &str, seed: u64, config_echo: &str, files: &[&str]) -> Result<Self> {
        let dir = dir.as_ref();
        let mut artifacts = BTreeMap::new();
        for f in files {
            artifacts.insert((*f).to_owned(), file_hash(dir.join(f))?);
        }
        let m = Self {
            stage: stage.to_owned(),
            seed,
            config_echo: config_echo.to_owned(),
            artifacts,
        };
        let path = dir.join(Self::file_name(stage));
        fs::write(&path, serde_json::to_string_pretty(&m).expect("serialize manifest"))
            .map_err(|e| Error::io(&path, e))?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    /// Names of artifacts whose current content no longer matches.
    pub fn stale(&self, dir: impl AsRef<Path>) -> Vec<String> {
        let dir = dir.as_ref();
        self.artifacts
            .iter()
            .filter(|(name, hash)| file_hash(dir.join(name)).ok().as_deref() != Some(hash.as_str()))
            .map(|(name, _)| name.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_git_blob_format() {
        // `git hash-object --object-format=sha256` of an empty file
        assert_eq!(
            content_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
    }

    #[test]
    fn manifest_round_trip_and_staleness() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.txt"), "hello").unwrap();
        let m = Manifest::write(dir.path(), "demo", 3, "seed=3\n", &["a.txt"]).unwrap();
        let back = Manifest::load(dir.path().join("demo.manifest.json")).unwrap();
        assert_eq!(m, back);
        assert!(back.stale(dir.path()).is_empty());
        fs::write(dir.path().join("a.txt"), "changed").unwrap();
        assert_eq!(back.stale(dir.path()), vec!["a.txt".to_owned()]);
    }
}
