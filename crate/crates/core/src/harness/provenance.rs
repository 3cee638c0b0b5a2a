//! Content hashes stamped onto every emitted table, and the per-run
//! artifact manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Git-style object hash (`blob <len>\0` header) over SHA-256.
pub fn git_blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// SHA-256 of the compact JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(value)?)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoHash {
    pub file: String,
    pub hash: String,
}

/// One hash over a set of demo files, tree-object style.
pub fn demo_set_hash(files: &[DemoHash]) -> String {
    let listing: String = files.iter().map(|f| format!("{} {}\n", f.hash, f.file)).collect();
    git_blob_hash(listing.as_bytes())
}

/// Columns appended to every emitted table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableProvenance {
    pub config_hash: String,
    pub demo_hash: String,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Invalid(format!("writing {}: {other:?}", path.display())),
    }
}

/// RFC 4180 CSV with a header row; every row ends in the provenance columns.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], prov: &TableProvenance) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize((r, prov)).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub bytes: u64,
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub demos: Vec<DemoHash>,
    pub artifacts: Vec<Artifact>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config_hash: String) -> Self {
        Self { command: command.into(), seed, config_hash, demos: Vec::new(), artifacts: Vec::new() }
    }

    /// Hashes `path`, stored relative to `root`.
    pub fn record(&mut self, root: &Path, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let rel = path.strip_prefix(root).unwrap_or(path);
        let entry = Artifact { path: rel.display().to_string(), bytes: bytes.len() as u64, hash: git_blob_hash(&bytes) };
        match self.artifacts.iter_mut().find(|a| a.path == entry.path) {
            Some(a) => *a = entry,
            None => self.artifacts.push(entry),
        }
        Ok(())
    }

    pub fn path(dir: &Path) -> PathBuf {
        dir.join("manifest.json")
    }

    /// Merges into an existing manifest of `dir` so that several commands
    /// can share one output directory.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = Self::path(dir);
        let mut runs: Vec<Manifest> = match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(Error::io(&path, e)),
        };
        runs.push(self.clone());
        fs::write(&path, serde_json::to_vec_pretty(&runs)?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git_sha256_objects() {
        // `git hash-object --object-format=sha256` of an empty file.
        assert_eq!(git_blob_hash(b""), "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813");
    }

    #[test]
    fn manifest_accumulates_runs() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("a.csv");
        fs::write(&f, "x\n1\n").unwrap();
        let mut m = Manifest::new("eval", 3, "abc".into());
        m.record(dir.path(), &f).unwrap();
        m.record(dir.path(), &f).unwrap();
        assert_eq!(m.artifacts.len(), 1);
        assert_eq!(m.artifacts[0].path, "a.csv");
        m.write(dir.path()).unwrap();
        m.write(dir.path()).unwrap();
        let csv = dir.path().join("t.csv");
        let prov = TableProvenance { config_hash: "c".into(), demo_hash: "d".into() };
        write_csv(&csv, &[Artifact { path: "p".into(), bytes: 1, hash: "h".into() }], &prov).unwrap();
        assert_eq!(fs::read_to_string(&csv).unwrap(), "path,bytes,hash,config_hash,demo_hash\np,1,h,c,d\n");
        let runs: Vec<Manifest> = serde_json::from_slice(&fs::read(Manifest::path(dir.path())).unwrap()).unwrap();
        assert_eq!(runs.len(), 2);
    }
}
