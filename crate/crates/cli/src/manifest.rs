//! `run.json`: what produced a set of artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const RUN_FILE: &str = "run.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub seed: Option<u64>,
    pub config: Value,
    pub dataset_hash: Option<String>,
    /// Content hashes of files read, keyed by role.
    pub inputs: BTreeMap<String, String>,
    /// Content hashes of files written, keyed by file name.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, args: &[String], seed: Option<u64>, config: Value) -> Self {
        Self {
            command: command.to_string(),
            args: args.to_vec(),
            seed,
            config,
            dataset_hash: None,
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        self.inputs.insert(role.to_string(), hash_file(path)?);
        Ok(())
    }

    /// Hashes each named file in `dir` into the artifact table.
    pub fn artifacts_in(&mut self, dir: &Path, names: &[&str]) -> Result<()> {
        for name in names {
            self.artifacts.insert(name.to_string(), hash_file(&dir.join(name))?);
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
    }
}

fn tag(hasher: Sha256) -> String {
    format!("sha256:{}", hex::encode(hasher.finalize()))
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    tag(h)
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(hash_bytes(&bytes))
}

/// One hash over every regular file under `dir`, by sorted relative path.
pub fn hash_dir(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        if rel == RUN_FILE {
            continue;
        }
        let bytes = fs::read(dir.join(&rel)).with_context(|| format!("cannot read {}", dir.join(&rel).display()))?;
        h.update(rel.as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(tag(h))
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("cannot list {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            collect(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("under root");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            hash_bytes(b"abc"),
            "sha256:ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn dir_hash_ignores_run_file_and_sees_content() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("sub/a.txt"), "one").unwrap();
        let h1 = hash_dir(dir.path()).unwrap();
        fs::write(dir.path().join(RUN_FILE), "{}").unwrap();
        assert_eq!(hash_dir(dir.path()).unwrap(), h1);
        fs::write(dir.path().join("sub/a.txt"), "two").unwrap();
        assert_ne!(hash_dir(dir.path()).unwrap(), h1);
    }
}
