//! Per-fold artifact directory with a hash-chained manifest.
//!
//! Every stage file is recorded with its SHA-256 and the hashes of the stage
//! files it was computed from. Loading a stage re-hashes it and every
//! ancestor on disk; any mismatch is reported before the bytes are used.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::sha256_hex;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub file: String,
    pub sha256: String,
    /// Input stage name -> hash it had when this stage was written.
    pub inputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub crate_version: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self {
            version: MANIFEST_VERSION,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            stages: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ArtifactStore {
    dir: PathBuf,
    manifest: Manifest,
}

impl ArtifactStore {
    /// Opens `dir`, creating it and an empty manifest if needed.
    pub fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        let manifest = if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let m: Manifest = serde_json::from_str(&text)?;
            if m.version != MANIFEST_VERSION {
                return Err(Error::Artifact(format!("unsupported manifest version {}", m.version)));
            }
            m
        } else {
            Manifest::default()
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn has(&self, stage: &str) -> bool {
        self.manifest.stages.contains_key(stage)
    }

    pub fn path(&self, stage: &str) -> Option<PathBuf> {
        self.manifest.stages.get(stage).map(|r| self.dir.join(&r.file))
    }

    /// Writes `bytes` to `file` as `stage`, chained to the current hashes of
    /// `inputs`, and drops every stage that depended on the old version.
    /// Rewriting identical, intact content keeps dependents.
    pub fn write(&mut self, stage: &str, file: &str, bytes: &[u8], inputs: &[&str]) -> Result<String> {
        let mut recorded = BTreeMap::new();
        for &inp in inputs {
            let rec = self
                .manifest
                .stages
                .get(inp)
                .ok_or_else(|| Error::Artifact(format!("stage `{stage}` needs missing input `{inp}`")))?;
            recorded.insert(inp.to_string(), rec.sha256.clone());
        }
        let path = self.dir.join(file);
        let hash = sha256_hex(bytes);
        if let Some(old) = self.manifest.stages.get(stage) {
            if old.file == file && old.sha256 == hash && old.inputs == recorded && self.verify(stage).is_ok() {
                return Ok(hash);
            }
        }
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.invalidate_dependents(stage);
        self.manifest.stages.insert(
            stage.to_string(),
            StageRecord {
                file: file.to_string(),
                sha256: hash.clone(),
                inputs: recorded,
            },
        );
        self.save()?;
        Ok(hash)
    }

    fn invalidate_dependents(&mut self, stage: &str) {
        let mut gone = vec![stage.to_string()];
        while let Some(s) = gone.pop() {
            let dependents: Vec<String> = self
                .manifest
                .stages
                .iter()
                .filter(|(name, r)| name.as_str() != stage && r.inputs.contains_key(&s))
                .map(|(name, _)| name.clone())
                .collect();
            for d in dependents {
                if self.manifest.stages.remove(&d).is_some() {
                    gone.push(d);
                }
            }
        }
    }

    fn save(&self) -> Result<()> {
        let path = self.dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Checks `stage` and all its ancestors: file hashes match the manifest
    /// and every recorded input hash matches the input's current hash.
    pub fn verify(&self, stage: &str) -> Result<()> {
        let mut stack = vec![stage.to_string()];
        let mut seen = std::collections::BTreeSet::new();
        while let Some(s) = stack.pop() {
            if !seen.insert(s.clone()) {
                continue;
            }
            let rec = self
                .manifest
                .stages
                .get(&s)
                .ok_or_else(|| Error::Artifact(format!("stage `{s}` has no artifact in {}", self.dir.display())))?;
            let path = self.dir.join(&rec.file);
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if sha256_hex(&bytes) != rec.sha256 {
                return Err(Error::Provenance(format!("{} was modified after it was written", path.display())));
            }
            for (inp, hash) in &rec.inputs {
                let cur = self
                    .manifest
                    .stages
                    .get(inp)
                    .ok_or_else(|| Error::Provenance(format!("input `{inp}` of `{s}` is missing")))?;
                if &cur.sha256 != hash {
                    return Err(Error::Provenance(format!("`{s}` was computed from a different `{inp}`")));
                }
                stack.push(inp.clone());
            }
        }
        Ok(())
    }

    /// Verified bytes of `stage`.
    pub fn read(&self, stage: &str) -> Result<Vec<u8>> {
        self.verify(stage)?;
        let path = self.path(stage).expect("verified stage exists");
        std::fs::read(&path).map_err(|e| Error::io(&path, e))
    }

    pub fn read_string(&self, stage: &str) -> Result<String> {
        String::from_utf8(self.read(stage)?).map_err(|e| Error::Artifact(format!("stage `{stage}` is not UTF-8: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ArtifactStore::open(dir.path()).unwrap();
        s.write("a", "a.txt", b"one", &[]).unwrap();
        s.write("b", "b.txt", b"two", &["a"]).unwrap();
        assert_eq!(s.read("b").unwrap(), b"two");
        std::fs::write(dir.path().join("a.txt"), b"ONE").unwrap();
        assert!(matches!(s.read("b"), Err(Error::Provenance(_))));
        let reopened = ArtifactStore::open(dir.path()).unwrap();
        assert!(reopened.read("b").is_err());
    }

    #[test]
    fn rewriting_input_drops_dependents() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ArtifactStore::open(dir.path()).unwrap();
        s.write("a", "a.txt", b"1", &[]).unwrap();
        s.write("b", "b.txt", b"2", &["a"]).unwrap();
        s.write("c", "c.txt", b"3", &["b"]).unwrap();
        s.write("a", "a.txt", b"1'", &[]).unwrap();
        assert!(s.has("a") && !s.has("b") && !s.has("c"));
        assert!(s.write("d", "d.txt", b"", &["zzz"]).is_err());
    }
}
