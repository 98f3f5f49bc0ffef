//! Artifact directory layout, content fingerprints, stage manifests, and
//! the single-instance lock.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub fn fingerprint(value: &serde_json::Value) -> String {
    // serde_json maps are sorted, so the serialization is canonical
    hex::encode(Sha256::digest(value.to_string().as_bytes()))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let mut r = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = r.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub fingerprint: String,
    /// Fingerprints of the stages this one read.
    pub inputs: BTreeMap<String, String>,
    /// Output files relative to the stage directory.
    pub files: Vec<String>,
    /// Per-part fingerprints for stages that cache parts separately.
    #[serde(default)]
    pub parts: BTreeMap<String, String>,
    pub seconds: f64,
    pub version: String,
}

pub struct ArtifactDir {
    root: PathBuf,
    _lock: File,
}

impl ArtifactDir {
    /// Creates the directory if needed and takes an exclusive lock on it
    /// for the lifetime of the value.
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating artifact directory {}", root.display()))?;
        let lock_path = root.join(".lock");
        let lock = File::create(&lock_path).with_context(|| format!("creating {}", lock_path.display()))?;
        if lock.try_lock().is_err() {
            bail!("artifact directory {} is in use by another ebr process", root.display());
        }
        Ok(Self { root: root.to_path_buf(), _lock: lock })
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.root.join(stage)
    }

    pub fn path(&self, stage: &str, file: &str) -> PathBuf {
        self.root.join(stage).join(file)
    }

    pub fn manifest(&self, stage: &str) -> Result<Option<Manifest>> {
        let p = self.path(stage, "manifest.json");
        if !p.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        Ok(Some(serde_json::from_str(&text).with_context(|| format!("corrupt manifest {}", p.display()))?))
    }

    /// A manifest whose listed files all exist.
    pub fn complete_manifest(&self, stage: &str) -> Result<Option<Manifest>> {
        Ok(self.manifest(stage)?.filter(|m| m.files.iter().all(|f| self.path(stage, f).is_file())))
    }

    pub fn write_manifest(&self, m: &Manifest) -> Result<()> {
        let p = self.path(&m.stage, "manifest.json");
        write_atomic(&p, serde_json::to_string_pretty(m)?.as_bytes())
    }

    pub fn clear_manifest(&self, stage: &str) -> Result<()> {
        let p = self.path(stage, "manifest.json");
        if p.exists() {
            fs::remove_file(&p)?;
        }
        Ok(())
    }
}

/// Writes to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_ignores_key_order() {
        let a: serde_json::Value = serde_json::from_str(r#"{"b":1,"a":[1,2]}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"a":[1,2],"b":1}"#).unwrap();
        assert_eq!(fingerprint(&a), fingerprint(&b));
        assert_ne!(fingerprint(&a), fingerprint(&serde_json::json!({"a": [2, 1], "b": 1})));
    }

    #[test]
    fn second_lock_on_same_directory_fails() {
        let dir = tempfile::tempdir().unwrap();
        let first = ArtifactDir::open(dir.path()).unwrap();
        assert!(ArtifactDir::open(dir.path()).is_err());
        drop(first);
        assert!(ArtifactDir::open(dir.path()).is_ok());
    }

    #[test]
    fn manifest_roundtrip_and_completeness() {
        let dir = tempfile::tempdir().unwrap();
        let art = ArtifactDir::open(dir.path()).unwrap();
        let m = Manifest {
            stage: "prepare".into(),
            fingerprint: "f".into(),
            inputs: BTreeMap::new(),
            files: vec!["dataset.bin".into()],
            parts: BTreeMap::new(),
            seconds: 0.5,
            version: "0".into(),
        };
        art.write_manifest(&m).unwrap();
        assert_eq!(art.manifest("prepare").unwrap(), Some(m.clone()));
        assert_eq!(art.complete_manifest("prepare").unwrap(), None);
        write_atomic(&art.path("prepare", "dataset.bin"), b"x").unwrap();
        assert_eq!(art.complete_manifest("prepare").unwrap(), Some(m));
        assert_eq!(art.manifest("cluster").unwrap(), None);
    }
}
